"""Well-known covariance functions written in the expression grammar.

Each builtin is a grammar tree plus a list of slot roles naming which
textbook parameter every hyperparameter slot carries. Slots are never
shared, so a parameter that appears twice in a formula (the Matern
lengthscales, the rational-quadratic ``alpha``) occupies two slots;
:meth:`BuiltinKernel.theta` expands named parameters into a slot vector.

:func:`closed_form` evaluates the textbook formulas directly and is used to
cross-check the tree evaluator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bounds import DEFAULT_BOUNDS
from .expr import X, Node, const, hyper, op

__all__ = ["BUILTIN_NAMES", "BuiltinKernel", "builtin", "closed_form"]

BUILTIN_NAMES = ("CON", "WN", "E", "EGamma", "SE", "M12", "M32", "M52", "RQ", "PER", "LIN")


@dataclass(frozen=True)
class BuiltinKernel:
    name: str
    expr: Node
    # (slot index, parameter name) for every slot, in slot order
    slot_roles: tuple[tuple[int, str], ...]
    # hyperparameter kind per slot, overriding the kinds inferred from the tree
    kinds: tuple[str, ...]

    @property
    def params(self) -> tuple[str, ...]:
        seen = []
        for _, name in self.slot_roles:
            base = name.lstrip("-")
            if base not in seen:
                seen.append(base)
        return tuple(seen)

    def theta(self, noise: float = 0.0, **params: float) -> np.ndarray:
        """Slot vector (noise last) from named textbook parameters."""
        missing = set(self.params) - set(params)
        if missing:
            raise TypeError(f"{self.name} needs parameters {sorted(missing)}")
        values = []
        for _, name in self.slot_roles:
            if name.startswith("-"):
                values.append(-params[name[1:]])
            else:
                values.append(params[name])
        return np.array(values + [noise], dtype=float)

    def draw_theta(self, rng: np.random.Generator, noise: float = 0.0, table=None) -> np.ndarray:
        """Random slot vector with repeated parameters tied together."""
        table = DEFAULT_BOUNDS if table is None else table
        return self.theta(noise, **{p: table[_PARAM_KINDS[p]].sample(rng) for p in self.params})


_PARAM_KINDS = {
    "c": "amplitude",
    "amplitude": "amplitude",
    "lengthscale": "scale",
    "frequency": "scale",
    "alpha": "positive",
    "gamma": "gamma",
    "shift": "shift",
}


def _amp(i):
    return op("square", op("hp", hyper(i)))


def _sqdist(i):
    return op("sq_dist", op("euc", X), hyper(i))


def _r(i):
    return op("sqrt", _sqdist(i))


def _neg(node):
    return op("multiply", const(-1), node)


def _exponential(name):
    expr = op("multiply", _amp(0), op("exp", _neg(_r(1))))
    return BuiltinKernel(name, expr, ((0, "amplitude"), (1, "lengthscale")),
                         ("amplitude", "scale"))


def _build(name: str) -> BuiltinKernel:
    if name == "CON":
        return BuiltinKernel(name, op("hp", hyper(0)), ((0, "c"),), ("amplitude",))
    if name == "WN":
        # zero tree; the white-noise effect lives in the noise slot
        return BuiltinKernel(name, op("add", const(-1), const(1)), (), ())
    if name in ("E", "M12"):
        return _exponential(name)
    if name == "EGamma":
        expr = op("multiply", _amp(0),
                  op("exp", _neg(op("power", _r(1), hyper(2)))))
        return BuiltinKernel(name, expr,
                             ((0, "amplitude"), (1, "lengthscale"), (2, "gamma")),
                             ("amplitude", "scale", "gamma"))
    if name == "SE":
        expr = op("multiply", _amp(0),
                  op("exp", op("multiply", const(-0.5), _sqdist(1))))
        return BuiltinKernel(name, expr, ((0, "amplitude"), (1, "lengthscale")),
                             ("amplitude", "scale"))
    if name == "M32":
        sqrt3 = op("sqrt", const(3))
        expr = op("multiply", _amp(0), op(
            "multiply",
            op("add", const(1), op("multiply", sqrt3, _r(1))),
            op("exp", _neg(op("multiply", sqrt3, _r(2))))))
        return BuiltinKernel(
            name, expr, ((0, "amplitude"), (1, "lengthscale"), (2, "lengthscale")),
            ("amplitude", "scale", "scale"))
    if name == "M52":
        sqrt5 = op("sqrt", const(5))
        five_thirds = op("multiply", const(5), op("div", const(3)))
        poly = op("add",
                  op("add", const(1), op("multiply", sqrt5, _r(1))),
                  op("multiply", five_thirds, _sqdist(2)))
        expr = op("multiply", _amp(0), op(
            "multiply", poly, op("exp", _neg(op("multiply", sqrt5, _r(3))))))
        return BuiltinKernel(
            name, expr,
            ((0, "amplitude"), (1, "lengthscale"), (2, "lengthscale"), (3, "lengthscale")),
            ("amplitude", "scale", "scale", "scale"))
    if name == "RQ":
        inner = op("add", const(1), op(
            "multiply", op("multiply", const(0.5), op("div", op("hp", hyper(1)))),
            _sqdist(2)))
        expr = op("multiply", _amp(0), op("power", inner, hyper(3)))
        return BuiltinKernel(
            name, expr,
            ((0, "amplitude"), (1, "alpha"), (2, "lengthscale"), (3, "-alpha")),
            ("amplitude", "positive", "scale", "negative"))
    if name == "PER":
        # spectral map at angular frequency h1, then a squared distance with
        # lengthscale h2: exp(-2 sin^2(h1 * r / 2) / h2^2)
        expr = op("multiply", _amp(0), op("exp", op(
            "multiply", const(-0.5),
            op("sq_dist", op("spectral", X, hyper(1)), hyper(2)))))
        return BuiltinKernel(name, expr,
                             ((0, "amplitude"), (1, "frequency"), (2, "lengthscale")),
                             ("amplitude", "scale", "scale"))
    if name == "LIN":
        expr = op("dot_prod", op("euc", X), hyper(0), hyper(1))
        return BuiltinKernel(name, expr, ((0, "shift"), (1, "lengthscale")),
                             ("shift", "scale"))
    raise ValueError(f"unknown builtin kernel {name!r}; choose from {BUILTIN_NAMES}")


_CACHE: dict[str, BuiltinKernel] = {}


def builtin(name: str) -> BuiltinKernel:
    key = name.upper() if name.upper() != "EGAMMA" else "EGamma"
    if key not in _CACHE:
        _CACHE[key] = _build(key)
    return _CACHE[key]


def closed_form(name: str, x, x2, **p: float) -> float:
    """Textbook formula for builtin ``name`` with named parameters ``p``.

    ``PER`` takes ``frequency`` (angular, so the period is
    ``2 * pi / frequency``) and ``lengthscale``; ``WN`` is zero away from the
    matrix diagonal and is returned as zero here.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    name = builtin(name).name
    if name == "CON":
        return float(p["c"])
    if name == "WN":
        return 0.0
    if name == "LIN":
        s = p["shift"]
        return float(np.dot(x - s, x2 - s) / p["lengthscale"])
    dist = float(np.linalg.norm(x - x2))
    a2 = p["amplitude"] ** 2
    if name == "PER":
        period = 2.0 * math.pi / p["frequency"]
        return a2 * math.exp(-2.0 * math.sin(math.pi * dist / period) ** 2
                             / p["lengthscale"] ** 2)
    r = dist / p["lengthscale"]
    if name in ("E", "M12"):
        return a2 * math.exp(-r)
    if name == "EGamma":
        return a2 * math.exp(-r ** p["gamma"])
    if name == "SE":
        return a2 * math.exp(-0.5 * r * r)
    if name == "M32":
        return a2 * (1.0 + math.sqrt(3.0) * r) * math.exp(-math.sqrt(3.0) * r)
    if name == "M52":
        return a2 * (1.0 + math.sqrt(5.0) * r + 5.0 / 3.0 * r * r) * math.exp(-math.sqrt(5.0) * r)
    if name == "RQ":
        alpha = p["alpha"]
        return a2 * (1.0 + r * r / (2.0 * alpha)) ** (-alpha)
    raise ValueError(name)
