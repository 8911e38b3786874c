"""Hyperparameter bounds and initial-value distributions by slot kind."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import Node, slot_kinds


@dataclass(frozen=True)
class SlotSpec:
    lower: float
    upper: float
    init_low: float
    init_high: float
    log_init: bool = False
    negate_init: bool = False

    def __post_init__(self):
        if not self.lower <= self.upper or not self.init_low <= self.init_high:
            raise ValueError("bounds and initial range must be ordered low <= high")
        if self.log_init and self.init_low <= 0:
            raise ValueError("log-uniform initial range must be positive")

    def sample(self, rng: np.random.Generator) -> float:
        if self.log_init:
            v = float(np.exp(rng.uniform(np.log(self.init_low), np.log(self.init_high))))
        else:
            v = float(rng.uniform(self.init_low, self.init_high))
        return -v if self.negate_init else v


DEFAULT_BOUNDS: dict[str, SlotSpec] = {
    "scale": SlotSpec(1e-5, 1e3, 1e-3, 1e2, log_init=True),
    "amplitude": SlotSpec(-1e3, 1e3, 1e-3, 1e2, log_init=True),
    "positive": SlotSpec(1e-5, 1e3, 1e-3, 1e2, log_init=True),
    "negative": SlotSpec(-1e3, -1e-5, 1e-3, 1e2, log_init=True, negate_init=True),
    "shift": SlotSpec(-1e3, 1e3, -10.0, 10.0),
    "exponent": SlotSpec(-1e3, 1e3, -10.0, 10.0),
    "gamma": SlotSpec(1e-5, 2.0, 0.1, 2.0),
    "noise": SlotSpec(1e-5, 1e3, 1e-3, 1e2, log_init=True),
}


def theta_kinds(expr: Node, kinds=None) -> list[str]:
    """Kinds for every theta entry; the noise entry comes last."""
    inferred = slot_kinds(expr)
    if kinds is None:
        return inferred + ["noise"]
    kinds = list(kinds)
    if len(kinds) != len(inferred):
        raise ValueError(f"expected {len(inferred)} slot kinds, got {len(kinds)}")
    return kinds + ["noise"]


def theta_bounds(kinds, table=None) -> np.ndarray:
    """``(q, 2)`` array of lower/upper bounds for the given theta kinds."""
    table = DEFAULT_BOUNDS if table is None else table
    return np.array([[table[k].lower, table[k].upper] for k in kinds], dtype=float)


def sample_theta(kinds, rng: np.random.Generator, table=None) -> np.ndarray:
    table = DEFAULT_BOUNDS if table is None else table
    return np.array([table[k].sample(rng) for k in kinds], dtype=float)
