"""Evolutionary search over kernel expression trees.

Random trees come from a strongly-typed grow procedure with minimum and
maximum depths. Variation is either a crossover that joins a random
covariance subtree of each parent under ``add`` or ``multiply``, or one of
four type-safe mutations (insert, shrink, uniform, node replacement). Every
offspring must pass the PSD check and stay within the bloat depth limit,
otherwise the operator is retried; after too many attempts a parent is
returned unchanged.

Individuals are scored by BIC after optimizing their hyperparameters for a
chosen metric. Offspring inherit parent hyperparameters for the slots that
survive variation, and survivors keep optimizing from their own values.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .expr import (
    CONSTANTS,
    PRIMITIVES,
    ExprType,
    Node,
    canonical_hyper_reindex,
    const,
    depth,
    get_subtree,
    hyper,
    hyper_count,
    iter_nodes,
    replace_subtree,
    serialize,
)
from .gp import Dataset, GPEvaluator, MetricKind
from .hyperopt import PENALTY, InitStrategy, max_fun_call, optimize_hyperparams
from .psd import PsdCheckConfig, validate_kernel

__all__ = [
    "SearchConfig",
    "SearchStats",
    "Individual",
    "typed_grow",
    "gen_rand_pop",
    "crossover",
    "mutate",
    "MUTATIONS",
    "variate",
    "evaluate_individual",
    "evaluate_population",
    "select",
    "evocov",
    "random_search",
    "go_with_the_first",
]


@dataclass(frozen=True)
class SearchConfig:
    """Every tunable of the search; defaults are the published settings."""

    population_size: int = 141
    generations: int = 141
    n_selected: int = 14
    p_mutation: float = 0.4
    beta: float = 1e-5
    min_depth: int = 5
    max_depth: int = 15
    max_tree_depth: int = 40
    max_attempts: int = 250
    sigma_theta: float = 0.1
    ref_fun_call: int = 300
    series_len: int | None = None
    metric: str = "lml"
    psd: PsdCheckConfig = field(default_factory=PsdCheckConfig)
    ftol: float = 1e-6
    line_max_evals: int = 25
    mutation_min_depth: int = 1
    mutation_max_depth: int = 5
    leaf_weight: float = 1.0
    random_search_size: int = 20000
    gwf_population: int = 13
    gwf_steps: int = 200
    gwf_max_evaluations: int | None = None
    max_generation_attempts: int = 1_000_000
    n_jobs: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p_mutation <= 1.0:
            raise ValueError("p_mutation must lie in [0, 1]")
        if self.population_size < 0 or self.generations < 1:
            raise ValueError("population_size must be >= 0 and generations >= 1")
        if self.population_size and not self.n_selected < self.population_size:
            raise ValueError("n_selected must be smaller than population_size")
        if not 1 <= self.min_depth <= self.max_depth <= self.max_tree_depth:
            raise ValueError("need 1 <= min_depth <= max_depth <= max_tree_depth")
        MetricKind.parse(self.metric)

    @property
    def p_crossover(self) -> float:
        return 1.0 - self.p_mutation

    def budget(self, n_train: int) -> int:
        return max_fun_call(self.ref_fun_call, self.series_len or n_train)


@dataclass
class SearchStats:
    psd_checks: int = 0
    psd_rejects: int = 0
    depth_rejects: int = 0
    evaluations: int = 0
    fun_calls: int = 0
    penalized: int = 0
    restarts: int = 0

    @property
    def psd_reject_rate(self) -> float:
        return self.psd_rejects / self.psd_checks if self.psd_checks else 0.0


_ids = itertools.count()


@dataclass
class Individual:
    expr: Node
    theta: np.ndarray | None = None
    fitness: float = math.inf
    metric_score: float = math.nan
    evaluated: bool = False
    # inherited theta per slot (nan where no parent value exists)
    inherit: np.ndarray | None = None
    # slot-kind overrides, kept only while the tree is unchanged
    kinds: tuple[str, ...] | None = None
    lineage: tuple = ()
    uid: int = field(default_factory=lambda: next(_ids))

    @property
    def q(self) -> int:
        """Hyperparameter count including the noise slot."""
        return hyper_count(self.expr) + 1

    @property
    def depth(self) -> int:
        return depth(self.expr)

    @property
    def penalized(self) -> bool:
        return self.evaluated and not self.fitness < PENALTY

    def copy(self) -> "Individual":
        return replace(self, theta=None if self.theta is None else self.theta.copy(),
                       inherit=None if self.inherit is None else self.inherit.copy())

    def __str__(self) -> str:
        return serialize(self.expr)


# ---------------------------------------------------------------------------
# random generation

_MIN_DEPTH = {"x": 1, "hyper": 1, "const": 1, "euc": 2, "spectral": 2, "sq_dist": 3,
              "dot_prod": 3, "hp": 2}
_FRESH = 1 << 30  # slot indices at or above this have no parent value


def _groups(want: ExprType):
    terms, notnests, nests = [], [], []
    for name, prim in PRIMITIVES.items():
        if prim.output is not want:
            continue
        if prim.group == "terminal":
            if name == "const":
                terms.extend(("const", c) for c in CONSTANTS)
            else:
                terms.append((name, None))
        elif prim.group == "not_nestable":
            notnests.append((name, None))
        else:
            nests.append((name, None))
    return terms, notnests, nests


_GROUPS = {t: _groups(t) for t in ExprType}


class _SlotCounter:
    def __init__(self, start: int = 0):
        self.next = start

    def __call__(self) -> Node:
        node = hyper(self.next)
        self.next += 1
        return node


def _grow(d_min: int, d_max: int, want: ExprType, rng, new_slot) -> Node:
    terms, notnests, nests = _GROUPS[want]
    cands = []
    if d_min <= 3:
        cands += notnests
        if d_min <= 1:
            cands += terms
    if 4 <= d_max:
        cands += nests
    if not cands:
        cands = terms + notnests + nests
    # never pick something that cannot fit in the remaining depth
    fitting = [c for c in cands if _MIN_DEPTH.get(c[0], 2) <= max(d_max, 1)]
    if fitting:
        cands = fitting
    name, value = cands[rng.integers(len(cands))]
    if name == "const":
        return const(value)
    if name == "hyper":
        return new_slot()
    if name == "x":
        return Node("x")
    prim = PRIMITIVES[name]
    children = tuple(_grow(d_min - 1, d_max - 1, t, rng, new_slot) for t in prim.inputs)
    return Node(name, children)


def typed_grow(d_min: int, d_max: int, want: ExprType = ExprType.COV,
               rng: np.random.Generator | int | None = None) -> Node:
    """Random well-typed tree producing ``want`` with depth roughly in
    ``[d_min, d_max]``.

    Follows the grow recursion: not-nestable primitives once at most three
    levels of minimum depth remain, terminals once at most one remains, and
    nestable primitives while at least four levels of maximum depth remain.
    Slots are numbered densely left to right.
    """
    if not 1 <= d_min <= d_max:
        raise ValueError("need 1 <= d_min <= d_max")
    rng = np.random.default_rng(rng)
    node = _grow(d_min, d_max, want, rng, _SlotCounter())
    return canonical_hyper_reindex(node)[0]


def _check(expr: Node, cfg: SearchConfig, stats: SearchStats | None) -> bool:
    if depth(expr) > cfg.max_tree_depth:
        if stats is not None:
            stats.depth_rejects += 1
        return False
    ok = bool(validate_kernel(expr, cfg.psd))
    if stats is not None:
        stats.psd_checks += 1
        stats.psd_rejects += not ok
    return ok


def gen_rand_pop(n: int, cfg: SearchConfig, rng: np.random.Generator,
                 stats: SearchStats | None = None) -> list[Individual]:
    """``n`` random kernels that pass the PSD check (unevaluated)."""
    pop: list[Individual] = []
    attempts = 0
    while len(pop) < n:
        attempts += 1
        if attempts > cfg.max_generation_attempts and len(pop) < 1e-3 * attempts:
            raise RuntimeError(
                f"only {len(pop)} of {attempts} random kernels passed validation; "
                "check the depth limits and PSD configuration")
        expr = typed_grow(cfg.min_depth, cfg.max_depth, ExprType.COV, rng)
        if _check(expr, cfg, stats):
            pop.append(Individual(expr, lineage=("random",)))
    return pop


# ---------------------------------------------------------------------------
# variation


def _pick_path(expr: Node, rng, accept: Callable[[Node], bool], leaf_weight: float = 1.0):
    paths, weights = [], []
    for path, node in iter_nodes(expr):
        if accept(node):
            paths.append(path)
            weights.append(leaf_weight if not node.children else 1.0)
    if not paths:
        return None
    w = np.asarray(weights, dtype=float)
    return paths[rng.choice(len(paths), p=w / w.sum())]


def _is_cov(node: Node) -> bool:
    return node.output_type is ExprType.COV


def _offset_slots(node: Node, offset: int) -> Node:
    if node.kind == "hyper":
        return hyper(node.value + offset)
    if not node.children:
        return node
    return Node(node.kind, tuple(_offset_slots(c, offset) for c in node.children), node.value)


def _parent_values(ind: Individual) -> np.ndarray:
    """Slot values of an individual (noise excluded); nan when unknown."""
    q = hyper_count(ind.expr)
    if ind.theta is not None:
        return np.asarray(ind.theta[:q], dtype=float)
    if ind.inherit is not None:
        return np.asarray(ind.inherit[:q], dtype=float)
    return np.full(q, np.nan)


def _parent_noise(ind: Individual) -> float:
    if ind.theta is not None:
        return float(ind.theta[-1])
    if ind.inherit is not None:
        return float(ind.inherit[-1])
    return math.nan


def _make_child(expr: Node, values: np.ndarray, noise: float, lineage) -> Individual:
    new_expr, origin = canonical_hyper_reindex(expr)
    inherit = np.array([values[o] if o < len(values) else np.nan for o in origin] + [noise])
    return Individual(new_expr, inherit=inherit, lineage=lineage)


def _try_child(expr: Node, values, noise, lineage, cfg, stats) -> Individual | None:
    child = _make_child(expr, values, noise, lineage)
    return child if _check(child.expr, cfg, stats) else None


def crossover(a: Individual, b: Individual, cfg: SearchConfig, rng: np.random.Generator,
              stats: SearchStats | None = None) -> Individual:
    """Join a random covariance subtree of each parent with add or multiply."""
    qa = hyper_count(a.expr)
    values = np.concatenate([_parent_values(a), _parent_values(b)])
    b_expr = _offset_slots(b.expr, qa)
    noise = _parent_noise(a)
    for _ in range(cfg.max_attempts):
        pa = _pick_path(a.expr, rng, _is_cov, cfg.leaf_weight)
        pb = _pick_path(b_expr, rng, _is_cov, cfg.leaf_weight)
        joint = "add" if rng.random() < 0.5 else "multiply"
        expr = Node(joint, (get_subtree(a.expr, pa), get_subtree(b_expr, pb)))
        child = _try_child(expr, values, noise, ("crossover", a.uid, b.uid), cfg, stats)
        if child is not None:
            return child
    return _clone(a, "crossover-fallback")


def _clone(ind: Individual, tag: str) -> Individual:
    child = ind.copy()
    child.uid = next(_ids)
    if child.theta is not None:
        child.inherit = child.theta.copy()
    child.theta = None
    child.fitness = math.inf
    child.metric_score = math.nan
    child.evaluated = False
    child.lineage = (tag, ind.uid)
    return child


def _fresh_terminal(typ: ExprType, rng, new_slot) -> Node:
    if typ is ExprType.COV:
        return const(CONSTANTS[rng.integers(len(CONSTANTS))])
    if typ is ExprType.HYPER:
        return new_slot()
    if typ is ExprType.INPUT_PAIR:
        return Node("x")
    raise ValueError(typ)


_NESTABLE = [n for n, p in PRIMITIVES.items() if p.group == "nestable"]
_SWAPPABLE = {
    (ExprType.COV,): ["div", "exp", "sqrt", "square"],
    (ExprType.COV, ExprType.COV): ["add", "multiply"],
}


def _mut_insert(expr, cfg, rng, new_slot):
    path = _pick_path(expr, rng, _is_cov, cfg.leaf_weight)
    target = get_subtree(expr, path)
    name = _NESTABLE[rng.integers(len(_NESTABLE))]
    prim = PRIMITIVES[name]
    cov_positions = [i for i, t in enumerate(prim.inputs) if t is ExprType.COV]
    pos = cov_positions[rng.integers(len(cov_positions))]
    children = [target if i == pos else _fresh_terminal(t, rng, new_slot)
                for i, t in enumerate(prim.inputs)]
    return replace_subtree(expr, path, Node(name, tuple(children)))


def _mut_shrink(expr, cfg, rng, new_slot):
    path = _pick_path(expr, rng, lambda n: n.kind in _NESTABLE)
    if path is None:
        return None
    node = get_subtree(expr, path)
    inputs = [c for c in node.children if _is_cov(c)]
    return replace_subtree(expr, path, inputs[rng.integers(len(inputs))])


def _mut_uniform(expr, cfg, rng, new_slot):
    path = _pick_path(expr, rng, lambda n: n.kind != "x", cfg.leaf_weight)
    typ = get_subtree(expr, path).output_type
    sub = _grow(cfg.mutation_min_depth, cfg.mutation_max_depth, typ, rng, new_slot)
    return replace_subtree(expr, path, sub)


def _mut_replace(expr, cfg, rng, new_slot):
    def swappable(n):
        return n.kind in _SWAPPABLE.get(n.primitive.inputs, ())

    path = _pick_path(expr, rng, swappable)
    if path is None:
        return None
    node = get_subtree(expr, path)
    options = [k for k in _SWAPPABLE[node.primitive.inputs] if k != node.kind]
    kind = options[rng.integers(len(options))]
    return replace_subtree(expr, path, Node(kind, node.children))


MUTATIONS = {
    "insert": _mut_insert,
    "shrink": _mut_shrink,
    "uniform": _mut_uniform,
    "node_replacement": _mut_replace,
}


def mutate(a: Individual, cfg: SearchConfig, rng: np.random.Generator,
           stats: SearchStats | None = None, method: str | None = None) -> Individual:
    """Apply one randomly chosen mutation (or ``method``), retrying until the
    result passes the PSD and depth checks; falls back to a parent copy."""
    names = list(MUTATIONS)
    values = _parent_values(a)
    noise = _parent_noise(a)
    for _ in range(cfg.max_attempts):
        name = method or names[rng.integers(len(names))]
        expr = MUTATIONS[name](a.expr, cfg, rng, _SlotCounter(_FRESH))
        if expr is None:
            continue
        child = _try_child(expr, values, noise, (name, a.uid), cfg, stats)
        if child is not None:
            return child
    return _clone(a, "mutation-fallback")


def variate(sel: list[Individual], count: int, cfg: SearchConfig, rng: np.random.Generator,
            stats: SearchStats | None = None) -> list[Individual]:
    """``count`` offspring of ``sel`` by mutation (probability ``p_mutation``)
    or crossover of two distinct parents."""
    parents = [s for s in sel if not s.penalized] or list(sel)
    if not parents:
        return []
    out = []
    for _ in range(count):
        if rng.random() < cfg.p_mutation or len(parents) < 2:
            out.append(mutate(parents[rng.integers(len(parents))], cfg, rng, stats))
        else:
            i, j = rng.choice(len(parents), size=2, replace=False)
            out.append(crossover(parents[i], parents[j], cfg, rng, stats))
    return out


# ---------------------------------------------------------------------------
# evaluation and selection


def evaluate_individual(expr: Node, train: Dataset, metric, max_evals: int,
                        init: InitStrategy, seed, kinds=None, ftol: float = 1e-6,
                        line_max_evals: int = 25):
    """Optimize hyperparameters and score by BIC.

    Returns ``(theta, metric_score, bic, nfev, restarts)``; unevaluable kernels
    get a BIC of at least ``PENALTY``.
    """
    metric = MetricKind.parse(metric)
    res = optimize_hyperparams(expr, train, metric, max_evals, init, seed, kinds=kinds,
                               ftol=ftol, line_max_evals=line_max_evals)
    metric_score = -res.score if metric.maximize else res.score
    if res.all_penalized:
        return res.theta, math.nan, PENALTY, res.nfev, res.restarts
    ev = GPEvaluator(expr, train)
    try:
        lml = metric_score if metric is MetricKind.LML else ev.lml(res.theta)
        fit = -2.0 * lml + ev.q * math.log(train.n)
    except (ArithmeticError, np.linalg.LinAlgError, ValueError):
        fit = PENALTY
    if not math.isfinite(fit) or fit > PENALTY:
        fit = PENALTY
    return res.theta, metric_score, fit, res.nfev, res.restarts


def _eval_job(args):
    return evaluate_individual(*args)


def evaluate_population(pop: list[Individual], train: Dataset, cfg: SearchConfig,
                        rng: np.random.Generator, stats: SearchStats | None = None,
                        executor=None) -> None:
    """Optimize and score every individual in place.

    Evaluated individuals restart from their own best hyperparameters
    (exactly first, then with noise); offspring start from inherited values.
    Seeds are drawn before any work is dispatched, so the outcome does not
    depend on parallelism.
    """
    max_evals = cfg.budget(train.n)
    jobs = []
    for ind in pop:
        if ind.evaluated and ind.theta is not None:
            init = InitStrategy.inherit(ind.theta, cfg.sigma_theta)
        elif ind.inherit is not None:
            init = InitStrategy.inherit(ind.inherit, cfg.sigma_theta)
        else:
            init = InitStrategy.uniform()
        seed = int(rng.integers(2 ** 63 - 1))
        jobs.append((ind.expr, train, cfg.metric, max_evals, init, seed, ind.kinds,
                     cfg.ftol, cfg.line_max_evals))
    if executor is not None:
        results = list(executor.map(_eval_job, jobs))
    else:
        results = [_eval_job(j) for j in jobs]
    for ind, (theta, score, fit, nfev, restarts) in zip(pop, results):
        ind.theta, ind.metric_score, ind.fitness = theta, score, fit
        ind.evaluated = True
        if stats is not None:
            stats.evaluations += 1
            stats.fun_calls += nfev
            stats.penalized += fit >= PENALTY


def select(pop: list[Individual], mu: int) -> list[Individual]:
    """Truncation selection: the ``mu`` lowest-BIC individuals, ties broken by
    fewer hyperparameters, then shallower trees, then position."""
    order = sorted(range(len(pop)),
                   key=lambda i: (pop[i].fitness, pop[i].q, pop[i].depth, i))
    return [pop[i] for i in order[:max(mu, 0)]]


def _best_fitness(pop) -> float:
    return min((ind.fitness for ind in pop), default=math.inf)


class _Executor:
    """Process pool when ``n_jobs > 1``; a no-op context otherwise."""

    def __init__(self, n_jobs: int):
        self.pool = ProcessPoolExecutor(n_jobs) if n_jobs and n_jobs > 1 else None

    def __enter__(self):
        return self.pool

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown()


def _record(telemetry, gen, pop, best, stats, restarts, prev_stats):
    if telemetry is None:
        return
    fits = [ind.fitness for ind in pop if ind.fitness < PENALTY]
    checks = stats.psd_checks - prev_stats[0]
    rejects = stats.psd_rejects - prev_stats[1]
    best_fit = min(_best_fitness(pop), best.fitness if best is not None else math.inf)
    telemetry({
        "gen": gen,
        "best_bic": best_fit,
        "mean_bic": float(np.mean(fits)) if fits else None,
        "restarts": restarts,
        "psd_reject_rate": rejects / checks if checks else 0.0,
        "eval_errors": sum(ind.fitness >= PENALTY for ind in pop),
    })


def evocov(train: Dataset, cfg: SearchConfig | None = None,
           rng: np.random.Generator | int | None = None,
           stats: SearchStats | None = None,
           telemetry: Callable[[dict], None] | None = None) -> Individual:
    """Evolve a kernel for ``train``; returns the lowest-BIC individual seen.

    Each generation evaluates the whole population. While the best BIC keeps
    improving by more than ``beta`` (relative), the ``n_selected`` best
    survive and the rest is refilled by variation; otherwise the best
    individual is stashed and the population restarts from random kernels.
    """
    cfg = SearchConfig() if cfg is None else cfg
    rng = np.random.default_rng(rng)
    stats = SearchStats() if stats is None else stats
    best: Individual | None = None
    with _Executor(cfg.n_jobs) as pool:
        # psd counters since the current population started being built
        snapshot = (stats.psd_checks, stats.psd_rejects)
        pop = gen_rand_pop(cfg.population_size, cfg, rng, stats)
        prev_best = math.inf
        i = 1
        while i < cfg.generations:
            evaluate_population(pop, train, cfg, rng, stats, pool)
            evaluated = pop
            best = _stash(best, pop)
            cur_best = _best_fitness(pop)
            if cfg.beta < _relative_improvement(prev_best, cur_best):
                sel = select(pop, cfg.n_selected)
                offspring = variate(sel, cfg.population_size - cfg.n_selected, cfg, rng, stats)
                pop = offspring + sel
                prev_best = cur_best
            else:
                pop = gen_rand_pop(cfg.population_size, cfg, rng, stats)
                prev_best = math.inf
                stats.restarts += 1
            _record(telemetry, i, evaluated, best, stats, stats.restarts, snapshot)
            snapshot = (stats.psd_checks, stats.psd_rejects)
            i += 1
        evaluate_population(pop, train, cfg, rng, stats, pool)
    best = _stash(best, pop)
    _record(telemetry, i, pop, best, stats, stats.restarts, snapshot)
    return best


def _relative_improvement(prev: float, cur: float) -> float:
    if math.isinf(prev):
        return math.inf
    if cur == 0:
        return math.inf if prev > cur else 0.0
    return (prev - cur) / abs(cur)


def _stash(best: Individual | None, pop: list[Individual]) -> Individual | None:
    """Best of ``pop`` and the stashed individual, as an independent copy."""
    candidates = list(pop) + ([best] if best is not None else [])
    if not candidates:
        return best
    top = select(candidates, 1)[0]
    return top if top is best else top.copy()


def random_search(train: Dataset, cfg: SearchConfig | None = None,
                  rng: np.random.Generator | int | None = None,
                  stats: SearchStats | None = None,
                  telemetry: Callable[[dict], None] | None = None) -> Individual:
    """Best of ``random_search_size`` random valid kernels."""
    cfg = SearchConfig() if cfg is None else cfg
    rng = np.random.default_rng(rng)
    stats = SearchStats() if stats is None else stats
    pop = gen_rand_pop(cfg.random_search_size, cfg, rng, stats)
    with _Executor(cfg.n_jobs) as pool:
        evaluate_population(pop, train, cfg, rng, stats, pool)
    _record(telemetry, 1, pop, None, stats, 0, (0, 0))
    return select(pop, 1)[0]


def go_with_the_first(train: Dataset, cfg: SearchConfig | None = None,
                      rng: np.random.Generator | int | None = None,
                      stats: SearchStats | None = None,
                      telemetry: Callable[[dict], None] | None = None) -> Individual:
    """Parallel hill climbers with elimination of the worst.

    Starts ``gwf_population`` random kernels. Each round, every survivor
    takes ``gwf_steps`` mutate-evaluate-keep-better steps, then the worst is
    dropped; rounds repeat until a single climber has finished its round.
    ``gwf_max_evaluations`` caps the total number of evaluations.
    """
    cfg = SearchConfig() if cfg is None else cfg
    rng = np.random.default_rng(rng)
    stats = SearchStats() if stats is None else stats
    cap = cfg.gwf_max_evaluations
    with _Executor(cfg.n_jobs) as pool:
        pop = gen_rand_pop(cfg.gwf_population, cfg, rng, stats)
        evaluate_population(pop, train, cfg, rng, stats, pool)
        used = len(pop)
        rnd = 0
        while pop:
            rnd += 1
            snapshot = (stats.psd_checks, stats.psd_rejects)
            for k in range(len(pop)):
                for _ in range(cfg.gwf_steps):
                    if cap is not None and used >= cap:
                        break
                    child = mutate(pop[k], cfg, rng, stats)
                    evaluate_population([child], train, cfg, rng, stats)
                    used += 1
                    if child.fitness < pop[k].fitness:
                        pop[k] = child
            _record(telemetry, rnd, pop, None, stats, 0, snapshot)
            if len(pop) == 1 or (cap is not None and used >= cap):
                break
            worst = select(pop, len(pop))[-1]
            pop = [p for p in pop if p is not worst]
    return select(pop, 1)[0]
