import math

import numpy as np
import pytest

from evocov.expr import eval_kernel, hyper_count, type_check
from evocov.kernels import BUILTIN_NAMES, builtin, closed_form


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtin_type_checks(name):
    b = builtin(name)
    type_check(b.expr)
    assert hyper_count(b.expr) == len(b.slot_roles) == len(b.kinds)


def test_lookup_is_case_insensitive():
    assert builtin("se") is builtin("SE")
    assert builtin("egamma").name == "EGamma"
    with pytest.raises(ValueError):
        builtin("nope")


def test_se_at_zero_is_amplitude_squared():
    se = builtin("SE")
    assert eval_kernel(se.expr, se.theta(amplitude=1.7, lengthscale=0.4), [0.3], [0.3]) == \
        pytest.approx(1.7 ** 2)


def test_m32_unit_distance():
    # the reference value of (1 + sqrt 3) exp(-sqrt 3)
    m32 = builtin("M32")
    value = eval_kernel(m32.expr, m32.theta(amplitude=1.0, lengthscale=1.0), [0.0], [1.0])
    assert value == pytest.approx((1 + math.sqrt(3)) * math.exp(-math.sqrt(3)), rel=1e-14)
    assert value == pytest.approx(0.4833577245965, rel=1e-12)


def test_lin_product():
    lin = builtin("LIN")
    assert eval_kernel(lin.expr, lin.theta(shift=0.0, lengthscale=1.0), [2.0], [3.0]) == \
        pytest.approx(6.0)


def test_per_is_one_period_periodic():
    per = builtin("PER")
    freq = 2 * math.pi / 0.25
    theta = per.theta(amplitude=1.5, frequency=freq, lengthscale=0.7)
    for k in range(1, 5):
        assert eval_kernel(per.expr, theta, [0.1], [0.1 + 0.25 * k]) == pytest.approx(2.25)


def test_m12_equals_e(rng):
    e, m12 = builtin("E"), builtin("M12")
    assert e.expr == m12.expr
    for _ in range(20):
        x, x2 = rng.uniform(-2, 2, 2)
        p = dict(amplitude=rng.uniform(0.1, 3), lengthscale=rng.uniform(0.1, 3))
        assert closed_form("E", x, x2, **p) == closed_form("M12", x, x2, **p)


def test_wn_tree_is_zero():
    wn = builtin("WN")
    assert eval_kernel(wn.expr, wn.theta(noise=0.3), [0.0], [0.0]) == 0.0


def test_rq_ties_alpha_and_negates_exponent():
    rq = builtin("RQ")
    theta = rq.theta(amplitude=1.0, alpha=2.5, lengthscale=0.3, noise=0.1)
    assert theta.tolist() == [1.0, 2.5, 0.3, -2.5, 0.1]


def test_draw_theta_ties_repeated_parameters(rng):
    m52 = builtin("M52")
    th = m52.draw_theta(rng)
    assert th[1] == th[2] == th[3]
