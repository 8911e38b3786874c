import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import periodic_trend
from evocov.estimator import EvoCovRegressor, KernelGPRegressor
from evocov.evolve import SearchConfig

TINY = SearchConfig(population_size=4, generations=2, n_selected=1, ref_fun_call=10,
                    series_len=350)


def test_kernel_regressor_fit_predict():
    X, y = periodic_trend(40)
    m = KernelGPRegressor("PER", ref_fun_call=100, random_state=0).fit(X, y)
    assert m.theta_.shape == (4,)
    mean, std = m.predict(X[:5], return_std=True)
    assert mean.shape == std.shape == (5,) and np.all(std > 0)
    assert m.score(X, y) > 0.5
    assert np.isfinite(m.bic_) and m.kernel_str_.startswith("(multiply")


def test_kernel_regressor_accepts_expression_text():
    X, y = periodic_trend(20)
    m = KernelGPRegressor("(dot_prod (euc x) h0 h1)", ref_fun_call=20, random_state=0)
    assert m.fit(X, y).theta_.shape == (3,)


def test_get_params_and_clone():
    m = KernelGPRegressor("SE", metric="loocv")
    assert clone(m).get_params() == m.get_params()
    e = EvoCovRegressor(algorithm="random_search", n_jobs=2)
    assert clone(e).get_params()["algorithm"] == "random_search"


def test_not_fitted_and_shape_checks():
    with pytest.raises(NotFittedError):
        KernelGPRegressor().predict(np.zeros((2, 1)))
    X, y = periodic_trend(15)
    m = KernelGPRegressor(ref_fun_call=10, random_state=0).fit(X, y)
    with pytest.raises(ValueError):
        m.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        KernelGPRegressor().fit(X, y[:-1])


@pytest.mark.parametrize("algorithm", ["evocov", "random_search", "go_with_the_first"])
def test_evocov_regressor(algorithm):
    X, y = periodic_trend(20)
    cfg = TINY if algorithm != "go_with_the_first" else \
        SearchConfig(gwf_population=2, gwf_steps=1, ref_fun_call=10, series_len=350)
    from dataclasses import replace
    cfg = replace(cfg, random_search_size=3)
    m = EvoCovRegressor(algorithm, config=cfg, random_state=0).fit(X, y)
    assert m.predict(X).shape == (20,)
    assert m.telemetry_ and np.isfinite(m.bic_)
    assert m.best_.fitness == pytest.approx(m.bic_, rel=1e-9)


def test_evocov_regressor_overrides():
    e = EvoCovRegressor(config=TINY, metric="loocv", ref_fun_call=12)
    cfg = e._config()
    assert cfg.metric == "loocv" and cfg.ref_fun_call == 12 and cfg.population_size == 4
    with pytest.raises(ValueError):
        EvoCovRegressor("nope").fit(*periodic_trend(12))
