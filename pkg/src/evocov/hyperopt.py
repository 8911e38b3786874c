"""Derivative-free hyperparameter optimization.

Powell's conjugate-direction method, restarted until an evaluation budget
is used up. Bounds are enforced by a penalty so the unconstrained line
searches are pushed back into the feasible box. Restarts either sample
uniformly from the slot kinds' initial distributions or, for kernels
produced by variation, start from inherited parent values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .bounds import DEFAULT_BOUNDS, sample_theta, theta_bounds, theta_kinds
from .expr import EvalError, Node
from .gp import Dataset, FactorizationError, GPEvaluator, MetricKind

__all__ = [
    "PENALTY",
    "OptBudget",
    "max_fun_call",
    "PowellResult",
    "powell_minimize",
    "penalized_objective",
    "InitStrategy",
    "OptResult",
    "optimize_hyperparams",
]

PENALTY = 1e12
_GOLD = 0.5 * (3.0 - math.sqrt(5.0))  # 0.381966...
_GROW = 1.0 + (1.0 + math.sqrt(5.0)) / 2.0


def max_fun_call(ref_fun_call: int, series_len: int) -> int:
    """Evaluations per hyperparameter optimization for a series length.

    Scales the reference budget (tuned for a series of 350 points) by the
    inverse square of the length, floored, and never below one.
    """
    if series_len < 1:
        raise ValueError("series length must be positive")
    return max(1, (ref_fun_call * 350 ** 2) // (series_len ** 2))


@dataclass(frozen=True)
class OptBudget:
    ref_fun_call: int
    series_len: int

    @property
    def max_fun_call(self) -> int:
        return max_fun_call(self.ref_fun_call, self.series_len)


# ---------------------------------------------------------------------------
# Powell


class PowellResult(NamedTuple):
    x: np.ndarray
    fun: float
    nfev: int
    nit: int
    converged: bool


class _Budgeted:
    """Objective wrapper that counts calls and remembers the best point."""

    def __init__(self, fun, max_evals):
        self.fun = fun
        self.max_evals = max_evals
        self.nfev = 0
        self.best_x = None
        self.best_f = math.inf

    @property
    def exhausted(self) -> bool:
        return self.nfev >= self.max_evals

    def __call__(self, x) -> float:
        self.nfev += 1
        f = float(self.fun(x))
        if not math.isfinite(f):
            f = math.inf
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=float)
        return f


class _OutOfBudget(Exception):
    pass


def _line_minimize(fun: _Budgeted, x, fx, direction, max_evals, tol=1e-8):
    """Minimize ``fun(x + t * direction)`` over ``t``.

    Golden-ratio bracketing followed by Brent's parabolic/golden search,
    using at most ``max_evals`` evaluations. Returns ``(t, f)`` for the best
    step found (``t = 0`` if nothing better than ``fx``).
    """
    used = 0

    def g(t):
        nonlocal used
        if used >= max_evals or fun.exhausted:
            raise _OutOfBudget
        used += 1
        return fun(x + t * direction)

    best_t, best_f = 0.0, fx
    try:
        a, fa = 0.0, fx
        b, fb = 1.0, g(1.0)
        if fb < best_f:
            best_t, best_f = b, fb
        if fb > fa:
            a, b, fa, fb = b, a, fb, fa
        c = b + (_GROW - 1.0) * (b - a)
        fc = g(c)
        if fc < best_f:
            best_t, best_f = c, fc
        while fc < fb:
            a, fa, b, fb = b, fb, c, fc
            c = b + (_GROW - 1.0) * (b - a)
            fc = g(c)
            if fc < best_f:
                best_t, best_f = c, fc

        # Brent on [lo, hi] starting from the bracket midpoint b
        lo, hi = min(a, c), max(a, c)
        v = w = xb = b
        fv = fw = fxb = fb
        d = e = 0.0
        while True:
            mid = 0.5 * (lo + hi)
            tol1 = tol * abs(xb) + 1e-12
            tol2 = 2.0 * tol1
            if abs(xb - mid) <= tol2 - 0.5 * (hi - lo):
                break
            use_golden = True
            if abs(e) > tol1:
                r = (xb - w) * (fxb - fv)
                q = (xb - v) * (fxb - fw)
                p = (xb - v) * q - (xb - w) * r
                q = 2.0 * (q - r)
                if q > 0:
                    p = -p
                q = abs(q)
                if abs(p) < abs(0.5 * q * e) and q * (lo - xb) < p < q * (hi - xb):
                    e, d = d, p / q
                    u = xb + d
                    if u - lo < tol2 or hi - u < tol2:
                        d = math.copysign(tol1, mid - xb)
                    use_golden = False
            if use_golden:
                e = (hi - xb) if xb < mid else (lo - xb)
                d = _GOLD * e
            u = xb + (d if abs(d) >= tol1 else math.copysign(tol1, d))
            fu = g(u)
            if fu < best_f:
                best_t, best_f = u, fu
            if fu <= fxb:
                if u >= xb:
                    lo = xb
                else:
                    hi = xb
                v, w, xb = w, xb, u
                fv, fw, fxb = fw, fxb, fu
            else:
                if u < xb:
                    lo = u
                else:
                    hi = u
                if fu <= fw or w == xb:
                    v, w, fv, fw = w, u, fw, fu
                elif fu <= fv or v == xb or v == w:
                    v, fv = u, fu
    except _OutOfBudget:
        pass
    return best_t, best_f


def powell_minimize(fun: Callable[[np.ndarray], float], x0, ftol: float = 1e-6,
                    max_evals: int = 1000, line_max_evals: int = 25,
                    directions=None) -> PowellResult:
    """Powell's conjugate-direction method.

    Each iteration line-minimizes along every direction in turn, then
    replaces the direction of largest decrease by the net displacement of
    the sweep (unless Powell's test says that would hurt conjugacy). Stops
    when a sweep improves the value by less than ``ftol`` relative, or when
    ``max_evals`` evaluations are spent. Never returns a point worse than
    ``x0``.
    """
    x = np.array(x0, dtype=float).ravel()
    q = x.size
    if q < 1:
        raise ValueError("need at least one variable")
    dirs = np.eye(q) if directions is None else np.array(directions, dtype=float)
    f = _Budgeted(fun, max(1, int(max_evals)))
    fx = f(x)
    nit = 0
    converged = False
    while not f.exhausted:
        nit += 1
        x_start, f_start = x.copy(), fx
        big_i, big_drop = 0, 0.0
        for i in range(q):
            if f.exhausted:
                break
            t, ft = _line_minimize(f, x, fx, dirs[i], line_max_evals)
            if fx - ft > big_drop:
                big_i, big_drop = i, fx - ft
            if ft < fx:
                x = x + t * dirs[i]
                fx = ft
        if 2.0 * (f_start - fx) <= ftol * (abs(f_start) + abs(fx)) + 1e-30:
            converged = True
            break
        if f.exhausted:
            break
        disp = x - x_start
        f_ext = f(x + disp)
        if f_ext < f_start:
            t = (2.0 * (f_start - 2.0 * fx + f_ext) * (f_start - fx - big_drop) ** 2
                 - big_drop * (f_start - f_ext) ** 2)
            if t < 0 and not f.exhausted:
                step, ft = _line_minimize(f, x, fx, disp, line_max_evals)
                if ft < fx:
                    x = x + step * disp
                    fx = ft
                dirs[big_i] = dirs[-1]
                dirs[-1] = disp
    best_x = f.best_x if f.best_x is not None else x
    return PowellResult(best_x, f.best_f, f.nfev, nit, converged)


# ---------------------------------------------------------------------------
# penalized objective


def penalized_objective(expr: Node, train: Dataset, metric: MetricKind, bounds,
                        evaluator: GPEvaluator | None = None) -> Callable[[np.ndarray], float]:
    """Metric as a function to minimize over theta.

    Out-of-bounds points cost ``PENALTY`` plus the squared distance to the
    box; kernels that fail to evaluate or factorize cost ``PENALTY``.
    """
    metric = MetricKind.parse(metric)
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    ev = GPEvaluator(expr, train) if evaluator is None else evaluator
    sign = -1.0 if metric.maximize else 1.0

    def objective(theta) -> float:
        theta = np.asarray(theta, dtype=float)
        below = np.minimum(theta - lo, 0.0)
        above = np.maximum(theta - hi, 0.0)
        violation = float(np.sum(below ** 2) + np.sum(above ** 2))
        if violation > 0:
            return PENALTY + violation
        try:
            value = ev.score(metric, theta)
        except (EvalError, FactorizationError, FloatingPointError, ValueError):
            return PENALTY
        if not math.isfinite(value):
            return PENALTY
        return sign * value

    return objective


# ---------------------------------------------------------------------------
# multi-start driver


@dataclass(frozen=True)
class InitStrategy:
    """Where restarts begin.

    ``parent_theta`` is ``None`` for uniform restarts. Otherwise it holds
    inherited values per theta entry with ``nan`` marking slots that have no
    parent value; the first restart uses the inherited values exactly, later
    restarts add Gaussian noise with standard deviation ``sigma``.
    """

    parent_theta: np.ndarray | None = None
    sigma: float = 0.1

    @classmethod
    def uniform(cls) -> "InitStrategy":
        return cls(None)

    @classmethod
    def inherit(cls, parent_theta, sigma: float = 0.1) -> "InitStrategy":
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        return cls(np.asarray(parent_theta, dtype=float), sigma)

    @property
    def inherits(self) -> bool:
        return self.parent_theta is not None and not np.all(np.isnan(self.parent_theta))

    def draw(self, restart: int, kinds, bounds, rng: np.random.Generator, table=None):
        fresh = sample_theta(kinds, rng, table)
        if not self.inherits:
            return fresh
        parent = self.parent_theta
        if parent.shape != fresh.shape:
            raise ValueError("inherited theta has the wrong length")
        known = ~np.isnan(parent)
        x = np.where(known, parent, fresh)
        if restart > 0 and self.sigma > 0:
            x = np.where(known, x + rng.normal(0.0, self.sigma, size=x.shape), x)
        return np.clip(x, bounds[:, 0], bounds[:, 1])


@dataclass
class OptResult:
    theta: np.ndarray
    score: float  # minimized objective value
    nfev: int
    restarts: int
    all_penalized: bool = False


def optimize_hyperparams(expr: Node, train: Dataset, metric=MetricKind.LML,
                         max_evals: int = 300, init: InitStrategy | None = None,
                         rng: np.random.Generator | int | None = None, kinds=None,
                         table=None, ftol: float = 1e-6,
                         line_max_evals: int = 25) -> OptResult:
    """Multi-start Powell until ``max_evals`` objective calls are spent.

    ``kinds`` overrides the slot kinds inferred from the tree (noise
    excluded). Returns the best point over all restarts; ``score`` is the
    minimized objective (negated metric for metrics where larger is better).
    """
    metric = MetricKind.parse(metric)
    rng = np.random.default_rng(rng)
    init = InitStrategy.uniform() if init is None else init
    all_kinds = theta_kinds(expr, kinds)
    table = DEFAULT_BOUNDS if table is None else table
    bounds = theta_bounds(all_kinds, table)
    objective = penalized_objective(expr, train, metric, bounds)

    best_x, best_f = None, math.inf
    used = 0
    restarts = 0
    while used < max_evals:
        x0 = init.draw(restarts, all_kinds, bounds, rng, table)
        res = powell_minimize(objective, x0, ftol=ftol, max_evals=max_evals - used,
                              line_max_evals=line_max_evals)
        used += res.nfev
        restarts += 1
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
    if best_x is None:
        best_x = init.draw(0, all_kinds, bounds, rng, table)
    return OptResult(np.asarray(best_x, dtype=float), float(best_f), used, restarts,
                     all_penalized=best_f >= PENALTY)
