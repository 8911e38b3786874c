"""Exact zero-mean Gaussian-process regression and model-quality metrics.

All metrics are computed from a Cholesky factorization of the noisy
training covariance. When the factorization fails a small diagonal jitter
is added and escalated tenfold up to ``1e-4 * mean(diag)``; past that a
:class:`FactorizationError` is raised so callers can penalize the kernel.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import lapack

from .expr import Node, compile_kernel, hyper_count

__all__ = [
    "Dataset",
    "Posterior",
    "MetricKind",
    "FactorizationError",
    "GPEvaluator",
    "posterior",
    "log_marginal_likelihood",
    "loocv",
    "split_train",
    "posterior_lml",
    "sopl",
    "traintest_rmse",
    "bic",
    "test_rmse",
]

_LOG_2PI = math.log(2.0 * math.pi)
JITTER_START = 1e-10
JITTER_STOP = 1e-4


class FactorizationError(np.linalg.LinAlgError):
    """Covariance matrix could not be factorized even with jitter."""


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` with shape ``(n, d)`` and targets ``f`` with shape ``(n,)``."""

    X: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        f = np.asarray(self.f, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != f.shape[0]:
            raise ValueError(f"X rows ({X.shape[0]}) and f ({f.shape[0]}) do not align")
        if f.shape[0] < 1:
            raise ValueError("a dataset needs at least one point")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(f))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "f", f)

    @property
    def n(self) -> int:
        return self.f.shape[0]

    def __len__(self) -> int:
        return self.n

    def subset(self, index) -> "Dataset":
        return Dataset(self.X[index], self.f[index])


class Posterior(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


class MetricKind(enum.Enum):
    LML = "lml"
    LOOCV = "loocv"
    POSTERIOR_LML = "posterior_lml"
    SOPL = "sopl"
    TRAINTEST_RMSE = "traintest_rmse"

    @property
    def maximize(self) -> bool:
        """True when larger values are better."""
        return self is not MetricKind.TRAINTEST_RMSE

    @property
    def needs_split(self) -> bool:
        return self not in (MetricKind.LML, MetricKind.LOOCV)

    @classmethod
    def parse(cls, value) -> "MetricKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"rmse": "traintest_rmse", "post_lml": "posterior_lml",
                   "postlml": "posterior_lml"}
        return cls(aliases.get(key, key))


def _factor(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K`` with the jitter ladder."""
    c, info = lapack.dpotrf(K, lower=1, clean=1)
    if info == 0:
        return c, 0.0
    scale = float(np.mean(np.diag(K)))
    if not scale > 0 or not np.isfinite(scale):
        raise FactorizationError("covariance has a non-positive mean diagonal")
    jitter = JITTER_START
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_STOP * (1 + 1e-9):
        c, info = lapack.dpotrf(K + jitter * scale * eye, lower=1, clean=1)
        if info == 0:
            return c, jitter * scale
        jitter *= 10.0
    raise FactorizationError("covariance is not positive definite")


def _solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = lapack.dpotrs(L, b, lower=1)
    if info != 0:
        raise FactorizationError("triangular solve failed")
    return x


def _gauss_logpdf(resid: np.ndarray, L: np.ndarray) -> float:
    """Log-density of ``resid`` under N(0, L L^T)."""
    alpha = _solve(L, resid)
    n = resid.shape[0]
    return float(-0.5 * resid @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG_2PI)


def split_train(train: Dataset, ratio: float = 0.9) -> tuple[Dataset, Dataset]:
    """Chronological split: first ``ceil(ratio * n)`` rows, clamped so both
    parts are non-empty."""
    n = train.n
    if n < 2:
        raise ValueError("split_train needs at least two points")
    k = min(max(math.ceil(ratio * n), 1), n - 1)
    return train.subset(slice(0, k)), train.subset(slice(k, n))


class GPEvaluator:
    """Metrics of one kernel on one training set as functions of theta.

    The kernel is compiled once against the training inputs (and against the
    internal train-train/train-test split when a split metric is used), so
    repeated calls during hyperparameter optimization only pay for the
    numerical work.
    """

    def __init__(self, expr: Node, train: Dataset, split_ratio: float = 0.9):
        self.expr = expr
        self.train = train
        self.q = hyper_count(expr) + 1
        self.split_ratio = split_ratio
        self._k_train = compile_kernel(expr, train.X, packed=True)
        self._split = None

    def _noisy(self, k_fun, theta) -> np.ndarray:
        K = k_fun.unpack(k_fun(theta))
        K[np.diag_indices_from(K)] += theta[-1] ** 2
        return K

    def _factor_train(self, theta):
        return _factor(self._noisy(self._k_train, theta))[0]

    def lml(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        L = self._factor_train(theta)
        return _gauss_logpdf(self.train.f, L)

    def loocv(self, theta) -> float:
        if self.train.n < 2:
            raise ValueError("LOOCV needs at least two points")
        theta = np.asarray(theta, dtype=float)
        L = self._factor_train(theta)
        Kinv = _solve(L, np.eye(self.train.n))
        alpha = Kinv @ self.train.f
        diag = np.diag(Kinv)
        if np.any(diag <= 0):
            raise FactorizationError("non-positive leave-one-out variance")
        var = 1.0 / diag
        resid = alpha / diag  # f_i - mu_i
        return float(np.sum(-0.5 * resid ** 2 / var - 0.5 * np.log(var) - 0.5 * _LOG_2PI))

    # -- split metrics ----------------------------------------------------

    def _split_parts(self):
        if self._split is None:
            tt, ts = split_train(self.train, self.split_ratio)
            self._split = (
                tt, ts,
                compile_kernel(self.expr, tt.X, packed=True),
                compile_kernel(self.expr, ts.X, tt.X),
                compile_kernel(self.expr, ts.X, packed=True),
            )
        return self._split

    def _split_posterior(self, theta, full_cov: bool):
        tt, ts, k_tt, k_st, k_ss = self._split_parts()
        L = _factor(self._noisy(k_tt, theta))[0]
        Ks = np.asarray(k_st(theta))
        mean = Ks @ _solve(L, tt.f)
        if not full_cov:
            return ts, mean, None, L, Ks
        cov = k_ss.unpack(k_ss(theta)) - Ks @ _solve(L, Ks.T)
        cov = 0.5 * (cov + cov.T)
        return ts, mean, cov, L, Ks

    def posterior_lml(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        ts, mean, cov, _, _ = self._split_posterior(theta, full_cov=True)
        cov[np.diag_indices_from(cov)] += theta[-1] ** 2
        L = _factor(cov)[0]
        return _gauss_logpdf(ts.f - mean, L)

    def sopl(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        ts, mean, _, L, Ks = self._split_posterior(theta, full_cov=False)
        k_ss = self._split_parts()[4]
        prior_var = np.diag(k_ss.unpack(k_ss(theta)))
        v = lapack.dtrtrs(L, Ks.T, lower=1)[0]
        var = prior_var - np.sum(v * v, axis=0)
        var = np.maximum(var, 0.0) + theta[-1] ** 2
        if np.any(var <= 0):
            raise FactorizationError("non-positive posterior variance")
        resid = ts.f - mean
        return float(np.sum(-0.5 * resid ** 2 / var - 0.5 * np.log(var) - 0.5 * _LOG_2PI))

    def traintest_rmse(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        ts, mean, _, _, _ = self._split_posterior(theta, full_cov=False)
        return float(np.sqrt(np.mean((mean - ts.f) ** 2)))

    def score(self, metric: MetricKind, theta) -> float:
        """Raw metric value (orientation per :attr:`MetricKind.maximize`)."""
        return _METRIC_METHODS[metric](self, theta)

    def bic(self, theta) -> float:
        return -2.0 * self.lml(theta) + self.q * math.log(self.train.n)


_METRIC_METHODS = {
    MetricKind.LML: GPEvaluator.lml,
    MetricKind.LOOCV: GPEvaluator.loocv,
    MetricKind.POSTERIOR_LML: GPEvaluator.posterior_lml,
    MetricKind.SOPL: GPEvaluator.sopl,
    MetricKind.TRAINTEST_RMSE: GPEvaluator.traintest_rmse,
}


# ---------------------------------------------------------------------------
# functional interface


def posterior(expr: Node, theta, train: Dataset, Xstar, include_noise: bool = False) -> Posterior:
    """Posterior mean and covariance at ``Xstar``.

    With ``include_noise`` the noise variance is added to the diagonal of the
    returned covariance (predictive distribution of noisy observations). The
    diagonal is clamped at zero after the subtraction.
    """
    theta = np.asarray(theta, dtype=float)
    Xstar = np.asarray(Xstar, dtype=float)
    if Xstar.ndim == 1:
        Xstar = Xstar[:, None]
    m = Xstar.shape[0]
    if m == 0:
        return Posterior(np.zeros(0), np.zeros((0, 0)))
    k_train = compile_kernel(expr, train.X)
    K = np.array(k_train(theta))
    K[np.diag_indices_from(K)] += theta[-1] ** 2
    L = _factor(K)[0]
    Ks = np.asarray(compile_kernel(expr, Xstar, train.X)(theta))
    Kss = np.asarray(compile_kernel(expr, Xstar)(theta))
    mean = Ks @ _solve(L, train.f)
    v = lapack.dtrtrs(L, Ks.T, lower=1)[0]
    cov = Kss - v.T @ v
    cov = 0.5 * (cov + cov.T)
    d = np.diag_indices_from(cov)
    cov[d] = np.maximum(cov[d], 0.0)
    if include_noise:
        cov[d] += theta[-1] ** 2
    return Posterior(mean, cov)


def log_marginal_likelihood(expr: Node, theta, train: Dataset) -> float:
    return GPEvaluator(expr, train).lml(theta)


def loocv(expr: Node, theta, train: Dataset) -> float:
    """Sum of leave-one-out log predictive densities (closed form)."""
    return GPEvaluator(expr, train).loocv(theta)


def posterior_lml(expr: Node, theta, train: Dataset, ratio: float = 0.9) -> float:
    """Joint log-density of the internal held-out block under the posterior
    given the earlier block (noise included)."""
    return GPEvaluator(expr, train, ratio).posterior_lml(theta)


def sopl(expr: Node, theta, train: Dataset, ratio: float = 0.9) -> float:
    """Sum of per-point posterior log-densities over the internal held-out
    block."""
    return GPEvaluator(expr, train, ratio).sopl(theta)


def traintest_rmse(expr: Node, theta, train: Dataset, ratio: float = 0.9) -> float:
    return GPEvaluator(expr, train, ratio).traintest_rmse(theta)


def bic(expr: Node, theta, train: Dataset) -> float:
    """``-2 LML + q log n`` with ``q`` counting the noise slot."""
    return GPEvaluator(expr, train).bic(theta)


def test_rmse(expr: Node, theta, train: Dataset, test: Dataset) -> float:
    if test.n == 0:
        raise ValueError("empty test set")
    mean = posterior(expr, theta, train, test.X).mean
    return float(np.sqrt(np.mean((mean - test.f) ** 2)))


test_rmse.__test__ = False  # not a pytest test when imported into test modules
