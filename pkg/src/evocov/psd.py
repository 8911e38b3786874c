"""Stochastic rejection of kernels that are not positive semi-definite.

A kernel is tested on a handful of random uniform datasets and random
hyperparameter draws. The Gram matrix of a valid kernel must be symmetric,
have a non-negative diagonal and have no negative eigenvalue; failing any
of these on any draw rejects the kernel. Passing is necessary, not
sufficient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .bounds import sample_theta, theta_kinds
from .expr import EvalError, Node, compile_kernel

__all__ = ["PsdCheckConfig", "PsdVerdict", "is_psd_matrix", "validate_kernel"]


@dataclass(frozen=True)
class PsdCheckConfig:
    w: int = 20
    n_per_set: int = 10
    d: int = 1
    theta_draws: int = 3
    sym_tol: float = 1e-8
    eig_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.w < 1 or self.n_per_set < 2 or self.theta_draws < 1 or self.d < 1:
            raise ValueError("PsdCheckConfig needs w >= 1, n_per_set >= 2, "
                             "theta_draws >= 1 and d >= 1")
        if self.sym_tol <= 0 or self.eig_tol <= 0:
            raise ValueError("PSD tolerances must be positive")


class PsdVerdict(NamedTuple):
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def is_psd_matrix(C, sym_tol: float = 1e-8, eig_tol: float = 1e-8) -> PsdVerdict:
    C = np.asarray(C, dtype=float)
    if not np.all(np.isfinite(C)):
        return PsdVerdict(False, "NonFinite")
    scale = float(np.max(np.abs(C))) if C.size else 0.0
    if np.max(np.abs(C - C.T), initial=0.0) > sym_tol * scale:
        return PsdVerdict(False, "asymmetric")
    diag = np.diag(C)
    if np.any(diag < -eig_tol * max(float(np.max(diag, initial=0.0)), 1.0)):
        return PsdVerdict(False, "negative diagonal")
    eig = np.linalg.eigvalsh(0.5 * (C + C.T))
    if eig.size and eig[0] < -eig_tol * max(float(np.max(np.abs(eig))), 1.0):
        return PsdVerdict(False, "negative eigenvalue")
    return PsdVerdict(True)


def validate_kernel(expr: Node, cfg: PsdCheckConfig | None = None,
                    draw_theta: Callable[[np.random.Generator], np.ndarray] | None = None,
                    bounds=None) -> PsdVerdict:
    """Check ``expr`` on ``cfg.w`` random datasets.

    Hyperparameters are drawn from the optimizer's initial-value
    distribution for each slot kind unless ``draw_theta`` is given. The
    noise term is never added. Deterministic for a fixed ``cfg.seed``.
    """
    cfg = PsdCheckConfig() if cfg is None else cfg
    rng = np.random.default_rng(cfg.seed)
    if draw_theta is None:
        kinds = theta_kinds(expr)

        def draw_theta(r):
            return sample_theta(kinds, r, bounds)

    for _ in range(cfg.w):
        data = rng.uniform(0.0, 1.0, size=(cfg.n_per_set, cfg.d))
        k = compile_kernel(expr, data, data)
        for _ in range(cfg.theta_draws):
            theta = draw_theta(rng)
            try:
                C = k(theta)
            except EvalError as err:
                return PsdVerdict(False, err.kind)
            verdict = is_psd_matrix(C, cfg.sym_tol, cfg.eig_tol)
            if not verdict:
                return verdict
    return PsdVerdict(True)
