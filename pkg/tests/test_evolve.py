import math

import numpy as np
import pytest

from conftest import periodic_trend
from evocov.evolve import (
    Individual,
    SearchConfig,
    SearchStats,
    crossover,
    evaluate_population,
    evocov,
    gen_rand_pop,
    go_with_the_first,
    mutate,
    random_search,
    select,
    typed_grow,
    variate,
)
from evocov.expr import ExprType, X, const, depth, hyper, hyper_count, op, type_check
from evocov.gp import Dataset
from evocov.hyperopt import PENALTY
from evocov.kernels import builtin
from evocov.psd import validate_kernel

# tiny budgets: series_len=350 makes the per-optimization budget equal ref_fun_call
FAST = SearchConfig(population_size=6, generations=3, n_selected=2, ref_fun_call=15,
                    series_len=350, random_search_size=4, gwf_population=3, gwf_steps=2)


@pytest.fixture(scope="module")
def train():
    X_, y = periodic_trend(25, seed=1)
    return Dataset(X_, y)


def ind(name, **kw):
    b = builtin(name)
    return Individual(b.expr, **kw)


# -- typed_grow ---------------------------------------------------------------

def test_grow_leaf_depth_one():
    for s in range(50):
        t = typed_grow(1, 1, ExprType.COV, s)
        assert t.kind == "const"


def test_grow_small_max_depth_yields_const():
    for s in range(50):
        assert typed_grow(1, 2, ExprType.COV, s).kind in ("const", "hp")
        assert depth(typed_grow(1, 2, ExprType.COV, s)) <= 2


def test_grow_hyper_type():
    assert typed_grow(3, 9, ExprType.HYPER, 0) == hyper(0)


def test_grow_types_and_depths():
    for s in range(300):
        t = typed_grow(5, 15, ExprType.COV, s)
        type_check(t)
        assert depth(t) <= 15
        assert sorted(set(i.value for i in _hypers(t))) == list(range(hyper_count(t)))


def _hypers(t):
    if t.kind == "hyper":
        yield t
    for c in t.children:
        yield from _hypers(c)


def test_grow_rejects_bad_depths():
    with pytest.raises(ValueError):
        typed_grow(3, 2)


# -- population ----------------------------------------------------------------

def test_gen_rand_pop():
    cfg = SearchConfig()
    assert gen_rand_pop(0, cfg, np.random.default_rng(0)) == []
    a = gen_rand_pop(5, cfg, np.random.default_rng(7))
    b = gen_rand_pop(5, cfg, np.random.default_rng(7))
    assert [p.expr for p in a] == [p.expr for p in b]
    assert all(validate_kernel(p.expr) and not p.evaluated for p in a)


def test_gen_rand_pop_guard(monkeypatch):
    import evocov.evolve as ev
    from evocov.psd import PsdVerdict
    monkeypatch.setattr(ev, "validate_kernel", lambda *a, **k: PsdVerdict(False, "x"))
    with pytest.raises(RuntimeError, match="passed validation"):
        gen_rand_pop(3, SearchConfig(max_generation_attempts=50), np.random.default_rng(0))


# -- variation -----------------------------------------------------------------

def test_crossover_structure(rng):
    a = ind("SE", theta=np.array([1.0, 0.2, 0.05]), evaluated=True, fitness=1.0)
    b = ind("PER", theta=np.array([2.0, 6.0, 0.5, 0.07]), evaluated=True, fitness=2.0)
    for _ in range(20):
        child = crossover(a, b, SearchConfig(), rng)
        assert child.expr.kind in ("add", "multiply")
        type_check(child.expr)
        assert validate_kernel(child.expr)
        assert len(child.inherit) == hyper_count(child.expr) + 1
        assert child.inherit[-1] == 0.05
        known = child.inherit[:-1]
        assert set(known[~np.isnan(known)]) <= {1.0, 0.2, 2.0, 6.0, 0.5}


def test_crossover_zero_attempts_returns_parent_copy(rng):
    a = ind("SE", theta=np.array([1.0, 0.2, 0.05]), evaluated=True)
    child = crossover(a, ind("PER"), SearchConfig(max_attempts=0), rng)
    assert child.expr == a.expr and child is not a and not child.evaluated
    np.testing.assert_array_equal(child.inherit, a.theta)


def test_node_replacement_reaches_multiply(rng):
    a = Individual(op("add", const(1), const(2)))
    kinds = {mutate(a, SearchConfig(), rng, method="node_replacement").expr.kind
             for _ in range(5)}
    assert kinds == {"multiply"}


def test_shrink_outcomes(rng):
    sub = op("exp", const(0.5))
    a = Individual(op("multiply", const(2), sub))
    seen = {mutate(a, SearchConfig(), rng, method="shrink").expr for _ in range(40)}
    assert const(2) in seen and sub in seen


def test_insert_wraps_a_node(rng):
    a = ind("SE")
    for _ in range(20):
        child = mutate(a, SearchConfig(), rng, method="insert")
        assert child.expr != a.expr
        type_check(child.expr)


def test_uniform_mutation_keeps_types(rng):
    a = ind("PER")
    for _ in range(20):
        type_check(mutate(a, SearchConfig(), rng, method="uniform").expr)


def test_many_mutations_of_se_stay_valid():
    rng = np.random.default_rng(0)
    a = ind("SE", theta=np.array([1.0, 0.2, 0.05]), evaluated=True)
    for _ in range(1000):
        child = mutate(a, SearchConfig(), rng)
        type_check(child.expr)
        assert depth(child.expr) <= 40
        assert len(child.inherit) == hyper_count(child.expr) + 1


def test_mutation_inherits_surviving_slots(rng):
    a = Individual(op("multiply", op("hp", hyper(0)), const(2)),
                   theta=np.array([1.7, 0.3]), evaluated=True)
    child = mutate(a, SearchConfig(), rng, method="node_replacement")
    assert child.expr == op("add", op("hp", hyper(0)), const(2))
    np.testing.assert_array_equal(child.inherit, [1.7, 0.3])


def test_depth_limit_enforced(rng):
    deep = builtin("SE").expr
    for _ in range(8):
        deep = op("sqrt", deep)
    cfg = SearchConfig(max_tree_depth=depth(deep), min_depth=1, max_depth=2)
    child = mutate(Individual(deep), cfg, rng, method="insert")
    assert child.expr == deep  # every insert exceeds the limit: parent copy
    assert child.lineage[0] == "mutation-fallback"


def test_variate_counts_and_fallbacks(rng):
    sel = [ind("SE"), ind("PER"), ind("LIN")]
    kids = variate(sel, 127, SearchConfig(), rng)
    assert len(kids) == 127
    all_mut = variate(sel, 10, SearchConfig(p_mutation=1.0), rng)
    assert all(k.lineage[0] != "crossover" for k in all_mut)
    single = variate(sel[:1], 10, SearchConfig(p_mutation=0.0), rng)
    assert all(k.lineage[0] != "crossover" for k in single)


def test_variate_skips_penalized_parents(rng):
    bad = ind("LIN", evaluated=True, fitness=PENALTY)
    good = ind("SE", evaluated=True, fitness=1.0)
    kids = variate([bad, good], 20, SearchConfig(p_mutation=1.0), rng)
    assert all(k.lineage[1] == good.uid for k in kids)


# -- selection and evaluation --------------------------------------------------

def test_select_examples():
    pop = [Individual(const(1), fitness=f) for f in (3.0, 1.0, 2.0)]
    assert [p.fitness for p in select(pop, 2)] == [1.0, 2.0]
    assert select(pop, 0) == []
    assert len(select(pop, 10)) == 3
    tie = [ind("PER", fitness=1.0), ind("SE", fitness=1.0)]
    assert select(tie, 1)[0].expr == builtin("SE").expr


def test_evaluate_population(train):
    pop = [ind("SE"), Individual(op("sqrt", const(-1)))]
    evaluate_population(pop, train, FAST, np.random.default_rng(0))
    assert pop[0].evaluated and math.isfinite(pop[0].fitness) and pop[0].fitness < PENALTY
    assert pop[1].fitness >= PENALTY and pop[1].penalized


def test_survivor_fitness_non_increasing(train):
    cfg = SearchConfig(ref_fun_call=30, series_len=350, sigma_theta=0.0)
    p = ind("SE", kinds=builtin("SE").kinds)
    rng = np.random.default_rng(3)
    history = []
    for _ in range(4):
        evaluate_population([p], train, cfg, rng)
        history.append(p.fitness)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_parallel_evaluation_matches_serial(train):
    from concurrent.futures import ProcessPoolExecutor
    a = [ind("SE"), ind("PER")]
    b = [ind("SE"), ind("PER")]
    evaluate_population(a, train, FAST, np.random.default_rng(9))
    with ProcessPoolExecutor(2) as pool:
        evaluate_population(b, train, FAST, np.random.default_rng(9), executor=pool)
    assert [x.fitness for x in a] == [x.fitness for x in b]


# -- searches ------------------------------------------------------------------

def test_evocov_single_generation(train):
    from dataclasses import replace
    log = []
    best = evocov(train, replace(FAST, generations=1), 0, telemetry=log.append)
    assert best.evaluated and len(log) == 1


def test_evocov_telemetry_and_monotone_best(train):
    log = []
    stats = SearchStats()
    best = evocov(train, FAST, 1, stats, log.append)
    assert [r["gen"] for r in log] == [1, 2, 3]
    assert set(log[0]) == {"gen", "best_bic", "mean_bic", "restarts", "psd_reject_rate",
                           "eval_errors"}
    bests = [r["best_bic"] for r in log]
    assert all(b <= a for a, b in zip(bests, bests[1:]))
    assert best.fitness == bests[-1]
    assert stats.evaluations == 3 * FAST.population_size


def test_evocov_infinite_beta_restarts_every_generation(train):
    from dataclasses import replace
    log = []
    evocov(train, replace(FAST, beta=math.inf), 2, telemetry=log.append)
    assert [r["restarts"] for r in log] == [1, 2, 2]


def test_evocov_deterministic(train):
    a = evocov(train, FAST, 11)
    b = evocov(train, FAST, 11)
    assert a.expr == b.expr and a.fitness == b.fitness


def test_random_search(train):
    from dataclasses import replace
    stats = SearchStats()
    best = random_search(train, FAST, 0, stats)
    assert stats.evaluations == FAST.random_search_size
    one = random_search(train, replace(FAST, random_search_size=1), 0)
    assert one.evaluated


def test_go_with_the_first_counts(train):
    stats = SearchStats()
    best = go_with_the_first(train, FAST, 0, stats)
    g, steps = FAST.gwf_population, FAST.gwf_steps
    climbs = sum(k * steps for k in range(g, 0, -1))
    # initial population plus every climb step; the last round has one climber
    assert stats.evaluations == g + climbs
    assert best.evaluated


def test_go_with_the_first_budget_cap(train):
    from dataclasses import replace
    stats = SearchStats()
    go_with_the_first(train, replace(FAST, gwf_max_evaluations=5), 0, stats)
    assert stats.evaluations == 5


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(population_size=10, n_selected=10)
    with pytest.raises(ValueError):
        SearchConfig(p_mutation=1.5)
    with pytest.raises(ValueError):
        SearchConfig(min_depth=6, max_depth=5)
    with pytest.raises(ValueError):
        SearchConfig(metric="nope")
    assert SearchConfig().p_crossover == pytest.approx(0.6)
