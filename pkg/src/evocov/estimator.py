"""scikit-learn style regressors on top of the kernel search."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .evolve import SearchConfig, SearchStats, evocov, go_with_the_first, random_search
from .expr import Node, parse, serialize
from .gp import Dataset, GPEvaluator, MetricKind, posterior
from .hyperopt import max_fun_call, optimize_hyperparams
from .kernels import BUILTIN_NAMES, builtin

__all__ = ["KernelGPRegressor", "EvoCovRegressor", "resolve_kernel"]

ALGORITHMS = {
    "evocov": evocov,
    "random_search": random_search,
    "go_with_the_first": go_with_the_first,
}


def resolve_kernel(kernel) -> tuple[Node, tuple[str, ...] | None]:
    """Tree and slot-kind overrides for a builtin name, a serialized tree or a
    :class:`Node`."""
    if isinstance(kernel, Node):
        return kernel, None
    text = str(kernel).strip()
    if text.upper() in {n.upper() for n in BUILTIN_NAMES}:
        b = builtin(text)
        return b.expr, b.kinds
    return parse(text), None


class _GPPredictMixin:
    """Shared prediction for fitted ``expr_``/``theta_``/``train_``."""

    def predict(self, X, return_std=False):
        """Posterior mean at ``X``; with ``return_std`` also the predictive
        standard deviation of a noisy observation."""
        check_is_fitted(self, "theta_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        post = posterior(self.expr_, self.theta_, self.train_, X, include_noise=True)
        if return_std:
            return post.mean, np.sqrt(np.diag(post.cov))
        return post.mean

    @property
    def kernel_str_(self) -> str:
        check_is_fitted(self, "expr_")
        return serialize(self.expr_)

    def _finish(self, train):
        ev = GPEvaluator(self.expr_, train)
        self.lml_ = ev.lml(self.theta_)
        self.bic_ = -2.0 * self.lml_ + ev.q * np.log(train.n)


class KernelGPRegressor(_GPPredictMixin, RegressorMixin, BaseEstimator):
    """GP regression with a fixed kernel structure.

    Parameters
    ----------
    kernel : str or Node, default="SE"
        Builtin name (``"SE"``, ``"PER"``...) or a serialized expression.
    metric : str, default="lml"
        Metric maximized (or, for ``"traintest_rmse"``, minimized) when
        fitting hyperparameters.
    ref_fun_call : int, default=300
        Reference optimizer budget for a 350-point series; the actual budget
        scales with the inverse square of the training length.
    random_state : int, Generator or None
        Seed for optimizer restarts.

    Attributes
    ----------
    expr_ : Node
    theta_ : ndarray
        Fitted slot values followed by the noise standard deviation.
    metric_score_ : float
    lml_, bic_ : float
    """

    def __init__(self, kernel="SE", metric="lml", ref_fun_call=300, random_state=None):
        self.kernel = kernel
        self.metric = metric
        self.ref_fun_call = ref_fun_call
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        metric = MetricKind.parse(self.metric)
        self.expr_, kinds = resolve_kernel(self.kernel)
        self.train_ = Dataset(X, y)
        res = optimize_hyperparams(
            self.expr_, self.train_, metric,
            max_fun_call(self.ref_fun_call, self.train_.n),
            rng=np.random.default_rng(self.random_state), kinds=kinds)
        if res.all_penalized:
            raise ValueError(f"kernel {serialize(self.expr_)} could not be fitted")
        self.theta_ = res.theta
        self.metric_score_ = -res.score if metric.maximize else res.score
        self._finish(self.train_)
        return self


class EvoCovRegressor(_GPPredictMixin, RegressorMixin, BaseEstimator):
    """GP regression with a kernel found by evolutionary search.

    Parameters
    ----------
    algorithm : {"evocov", "random_search", "go_with_the_first"}
    config : SearchConfig or None
        Search settings; ``None`` uses the published defaults. ``metric``,
        ``ref_fun_call`` and ``n_jobs`` below override the matching fields.
    metric : str or None
    ref_fun_call : int or None
    random_state : int or None
    n_jobs : int or None
        Worker processes for hyperparameter optimization. Results do not
        depend on this value.

    Attributes
    ----------
    best_ : Individual
    expr_, theta_ : fitted kernel and hyperparameters
    bic_ : float
    telemetry_ : list of dict
        One record per generation (or round).
    stats_ : SearchStats
    """

    def __init__(self, algorithm="evocov", config=None, metric=None, ref_fun_call=None,
                 random_state=None, n_jobs=None):
        self.algorithm = algorithm
        self.config = config
        self.metric = metric
        self.ref_fun_call = ref_fun_call
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self) -> SearchConfig:
        cfg = SearchConfig() if self.config is None else self.config
        changes = {k: v for k, v in (("metric", self.metric),
                                     ("ref_fun_call", self.ref_fun_call),
                                     ("n_jobs", self.n_jobs)) if v is not None}
        return replace(cfg, **changes) if changes else cfg

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; "
                             f"choose from {sorted(ALGORITHMS)}")
        cfg = self._config()
        if cfg.psd.d != X.shape[1]:
            cfg = replace(cfg, psd=replace(cfg.psd, d=X.shape[1]))
        self.n_features_in_ = X.shape[1]
        self.train_ = Dataset(X, y)
        self.telemetry_ = []
        self.stats_ = SearchStats()
        search = ALGORITHMS[self.algorithm]
        self.best_ = search(self.train_, cfg, np.random.default_rng(self.random_state),
                            self.stats_, self.telemetry_.append)
        if self.best_.penalized or self.best_.theta is None:
            raise RuntimeError("search found no kernel that could be evaluated")
        self.expr_ = self.best_.expr
        self.theta_ = self.best_.theta
        self.metric_score_ = self.best_.metric_score
        self._finish(self.train_)
        return self
