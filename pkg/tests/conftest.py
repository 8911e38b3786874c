import numpy as np
import pytest
from hypothesis import strategies as st

from evocov.evolve import typed_grow
from evocov.expr import ExprType


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_trees(d_min=1, d_max=6, want=ExprType.COV):
    """Hypothesis strategy: typed trees drawn through the grow procedure."""
    return st.integers(0, 2**32 - 1).map(lambda s: typed_grow(d_min, d_max, want, s))


def periodic_trend(n=60, seed=0, noise=0.05):
    """Normalized sin + trend series on [0, 1]."""
    r = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n)
    y = np.sin(2 * np.pi * t / 0.1) + 0.5 * t + r.normal(0.0, noise, n)
    return t[:, None], (y - y.mean()) / y.std()


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
