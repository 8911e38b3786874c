import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evocov.bounds import DEFAULT_BOUNDS, SlotSpec, sample_theta, theta_bounds, theta_kinds
from evocov.kernels import builtin


def test_kinds_append_noise():
    se = builtin("SE")
    assert theta_kinds(se.expr) == ["amplitude", "scale", "noise"]
    assert theta_kinds(se.expr, ["positive", "scale"]) == ["positive", "scale", "noise"]
    with pytest.raises(ValueError):
        theta_kinds(se.expr, ["scale"])


def test_bounds_table_shape():
    b = theta_bounds(["scale", "shift", "noise"])
    assert b.shape == (3, 2)
    np.testing.assert_array_equal(b[0], [1e-5, 1e3])
    assert b[1, 0] < 0 < b[1, 1]


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_samples_within_bounds(seed):
    kinds = list(DEFAULT_BOUNDS)
    rng = np.random.default_rng(seed)
    theta = sample_theta(kinds, rng)
    b = theta_bounds(kinds)
    assert np.all(theta >= b[:, 0]) and np.all(theta <= b[:, 1])
    assert theta[kinds.index("negative")] < 0


def test_slot_spec_validation():
    with pytest.raises(ValueError):
        SlotSpec(1.0, 0.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        SlotSpec(0.0, 1.0, 0.0, 1.0, log_init=True)
