"""Search-space evolution and constrained evolutionary architecture search.

Space evolution, per iteration: sample constrained architectures, score each
choice of each (kind, stage) subspace by the E-T error of the samples using
it, fit a line through (choice, E-T error), and shift the whole subspace by
``-floor(w / tau) * step``. Choices falling below the kind's lower bound are
dropped.

Slopes are fitted on errors multiplied by ``error_scale`` (100 by default, so
``tau`` reads in percentage points of error per unit of the choice).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cost import ModelShape, ResourceBudget, flop_count, param_count, within_budget
from .evaluator import (ConstraintInfeasible, EtReport, check_feasible, default_top_k, et_error,
                        measure_space, sample_constrained)
from .space import (NUM_STAGES, Architecture, DimensionKind, SearchSpace, SpaceLimit, Stage, Subspace,
                    cardinality, encode, partition_by_choice, sample_block, sample_uniform)

log = logging.getLogger(__name__)

SHIFT_MODES = ("floor", "symmetric")


class SpaceCollapsed(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FitResult:
    w: float
    b: float
    n: int
    degenerate: bool

    def to_dict(self) -> dict:
        return {"w": self.w, "b": self.b, "n": self.n, "degenerate": self.degenerate}


def linear_fit(points: Sequence[tuple[float, float]]) -> FitResult:
    """Ordinary least squares ``y = w x + b``; a single distinct x gives ``w = 0, b = mean(y)``."""
    if not points:
        raise ValueError("linear_fit needs at least one point")
    xs = [float(x) for x, _ in points]
    ys = [float(y) for _, y in points]
    n = len(xs)
    xbar = math.fsum(xs) / n
    ybar = math.fsum(ys) / n
    sxx = math.fsum((x - xbar) ** 2 for x in xs)
    if sxx == 0.0:
        return FitResult(0.0, ybar, n, True)
    sxy = math.fsum((x - xbar) * (y - ybar) for x, y in zip(xs, ys))
    w = sxy / sxx
    return FitResult(w, ybar - w * xbar, n, False)


def shift_steps(w: float, tau: float, mode: str = "floor") -> int:
    if tau <= 0:
        raise ValueError("tau must be positive")
    if mode == "floor":
        return math.floor(w / tau)
    if mode == "symmetric":
        return int(math.copysign(math.floor(abs(w) / tau), w)) if w else 0
    raise ValueError(f"unknown shift mode {mode!r}")


def _smallest_admissible(kind: DimensionKind):
    return 0.5 if kind is DimensionKind.MLP_RATIO else 1


def _shift(sub: Subspace, k: int) -> tuple[tuple, bool]:
    shifted = [v - k * sub.step for v in sub.choices]
    lb = sub.kind.lower_bound
    if sub.kind is DimensionKind.DEPTH:
        kept = [v for v in shifted if v >= lb]
    else:
        kept = [v for v in shifted if v > lb]
    if kept:
        return tuple(kept), False
    return (max(min(shifted), _smallest_admissible(sub.kind)),), True


def evolve_subspace(sub: Subspace, fit: FitResult | float, tau: float, mode: str = "floor") -> Subspace:
    """Shift every choice by ``-k * step`` with ``k = floor(w / tau)`` (or the sign-symmetric floor)."""
    w = fit.w if isinstance(fit, FitResult) else float(fit)
    k = shift_steps(w, tau, mode)
    if k == 0:
        return sub
    choices, _ = _shift(sub, k)
    return Subspace(sub.kind, sub.stage, choices, sub.step)


@dataclass(frozen=True)
class EvolutionConfig:
    iterations: int = 3
    tau: float = 0.4
    n_samples: int = 500
    top_k: int | None = None          # None: 5% of each group, capped at 50
    shift_mode: str = "floor"
    error_scale: float = 100.0
    max_size: int | None = None       # warn when |A| exceeds it
    measure_final: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.shift_mode not in SHIFT_MODES:
            raise ValueError(f"shift_mode must be one of {SHIFT_MODES}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_size is not None:
            SpaceLimit(self.max_size)

    def group_top_k(self, n: int) -> int:
        return default_top_k(n) if self.top_k is None else max(1, min(self.top_k, n))


@dataclass(frozen=True)
class SearchConfig:
    population: int = 50
    generations: int = 20
    parents: int = 10
    p_depth: float = 0.2
    p_embed: float = 0.2
    p_mutate: float = 0.4

    def __post_init__(self):
        for name in ("p_depth", "p_embed", "p_mutate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.parents <= self.population:
            raise ValueError("need 1 <= parents <= population")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")


@dataclass
class SearchResult:
    best: Architecture
    error: float
    params: int
    macs: int
    log: list[tuple[int, str, float, int, int]]  # generation, encoding, error, params, macs
    best_per_generation: list[float]

    def to_dict(self) -> dict:
        return {"best": encode(self.best), "error": self.error, "params": self.params, "macs": self.macs,
                "best_per_generation": self.best_per_generation}

    def log_csv(self) -> str:
        lines = ["generation,encoding,error,params,macs"]
        lines += [f"{g},{a},{e!r},{p},{m}" for g, a, e, p, m in self.log]
        return "\n".join(lines) + "\n"


@dataclass
class SpaceIteration:
    t: int
    space: SearchSpace
    report: EtReport | None
    fits: dict = field(default_factory=dict)          # (kind, stage) -> FitResult
    choice_errors: dict = field(default_factory=dict)  # (kind, stage) -> [(choice, scaled E-T error)]
    collapsed: list = field(default_factory=list)
    search: SearchResult | None = None
    cardinality: int = 0

    def to_dict(self) -> dict:
        key = lambda ks: f"{ks[0].value}/{ks[1]}"  # noqa: E731
        return {
            "t": self.t,
            "space": self.space.to_dict(),
            "cardinality": str(self.cardinality),
            "report": None if self.report is None else self.report.to_dict(),
            "fits": {key(k): v.to_dict() for k, v in self.fits.items()},
            "choice_errors": {key(k): [[c, y] for c, y in v] for k, v in self.choice_errors.items()},
            "collapsed": [key(k) for k in self.collapsed],
            "search": None if self.search is None else self.search.to_dict(),
        }


@dataclass
class SpaceHistory:
    iterations: list[SpaceIteration]
    warnings: list[str] = field(default_factory=list)

    @property
    def spaces(self) -> list[SearchSpace]:
        return [it.space for it in self.iterations]

    @property
    def final(self) -> SearchSpace:
        return self.iterations[-1].space

    def to_dict(self) -> dict:
        return {"iterations": [it.to_dict() for it in self.iterations], "warnings": list(self.warnings)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _subspace_points(samples, sub: Subspace, cfg: EvolutionConfig) -> list[tuple[float, float]]:
    groups = partition_by_choice(samples, sub.kind, sub.stage)
    return [(v, cfg.error_scale * et_error(errs, cfg.group_top_k(len(errs))).q)
            for v, errs in groups.items() if errs]


def evolve_once(space: SearchSpace, samples, cfg: EvolutionConfig,
                admissible: Callable[[DimensionKind, int, float], bool] | None = None):
    """One evolution step from measured samples; returns (new space, fits, points, collapsed keys)."""
    fits, points_by, collapsed, new_subs = {}, {}, [], []
    for sub in space.subspaces:
        key = (sub.kind, sub.stage)
        points = _subspace_points(samples, sub, cfg)
        fit = linear_fit(points) if points else FitResult(0.0, 0.0, 0, True)
        fits[key], points_by[key] = fit, points
        k = shift_steps(fit.w, cfg.tau, cfg.shift_mode)
        if k == 0:
            new_subs.append(sub)
            continue
        choices, fell_back = _shift(sub, k)
        if admissible is not None:
            choices = tuple(v for v in choices if admissible(sub.kind, sub.stage, v))
            if not choices:
                # nothing admissible after the shift: keep the subspace as it was
                new_subs.append(sub)
                continue
        if fell_back:
            collapsed.append(key)
        new_subs.append(Subspace(sub.kind, sub.stage, choices, sub.step))
    return space.replace(*new_subs), fits, points_by, collapsed


def _iteration_rng(seed: int, t: int, label: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, t, label]))


def evolve_space(space: SearchSpace, oracle, budget: ResourceBudget, config: EvolutionConfig, seed: int,
                 shape: ModelShape | None = None, search: SearchConfig | None = None,
                 admissible: Callable | None = None, workers: int = 1) -> SpaceHistory:
    """Iteratively evolve ``space``.

    ``oracle`` is an error function, or an object whose ``for_space(space, t)``
    returns the error function for iteration ``t`` (e.g. a freshly trained
    supernet). When ``search`` is given, an evolutionary search runs in every
    measured space.
    """
    history = SpaceHistory([])
    prev_collapsed: set = set()
    current = space
    total = config.iterations + (1 if config.measure_final else 0)
    for t in range(total):
        size = cardinality(current)
        if config.max_size is not None and size > config.max_size:
            msg = f"iteration {t}: |A| = {size} exceeds max_size {config.max_size}"
            log.warning(msg)
            history.warnings.append(msg)
        check_feasible(current, shape, budget)
        fn = oracle.for_space(current, t) if hasattr(oracle, "for_space") else oracle
        samples, report = measure_space(current, fn, shape, budget, config.n_samples,
                                        _iteration_rng(seed, t, 0), None, workers)
        it = SpaceIteration(t, current, report, cardinality=size)
        if search is not None:
            it.search = evolutionary_search(current, fn, budget, search, int(
                np.random.SeedSequence([seed, t, 1]).generate_state(1)[0]), shape, workers)
        history.iterations.append(it)
        if t == config.iterations:
            break
        nxt, it.fits, it.choice_errors, collapsed = evolve_once(current, samples, config, admissible)
        it.collapsed = collapsed
        repeat = prev_collapsed.intersection(collapsed)
        if repeat:
            msg = f"iteration {t}: subspaces collapsed twice in a row: " + ", ".join(
                f"{k.value}/{s}" for k, s in sorted(repeat, key=lambda ks: (ks[1], ks[0].value)))
            log.warning(msg)
            history.warnings.append("SpaceCollapsed: " + msg)
        prev_collapsed = set(collapsed)
        current = nxt
    if not config.measure_final:
        history.iterations.append(SpaceIteration(config.iterations, current, None,
                                                 cardinality=cardinality(current)))
    return history


# ---------------------------------------------------------------------------
# evolutionary architecture search
# ---------------------------------------------------------------------------

def _pick(rng: np.random.Generator, seq):
    return seq[rng.integers(len(seq))]


def crossover(a: Architecture, b: Architecture, rng: np.random.Generator) -> Architecture:
    stages = []
    for sa, sb in zip(a.stages, b.stages):
        pair = (sa, sb)
        depth = pair[rng.integers(2)].depth
        h = pair[rng.integers(2)].embed_dim
        m = pair[rng.integers(2)].mlp_ratio
        blocks = []
        for j in range(depth):
            donors = [s for s in pair if s.depth > j]
            blocks.append(donors[rng.integers(len(donors))].blocks[j])
        stages.append(Stage(h, m, tuple(blocks)))
    return Architecture(tuple(stages))


def mutate(arch: Architecture, space: SearchSpace, cfg: SearchConfig, rng: np.random.Generator) -> Architecture:
    stages = []
    for i, st in enumerate(arch.stages, 1):
        blocks = list(st.blocks)
        if rng.random() < cfg.p_depth:
            d = _pick(rng, space.choices(DimensionKind.DEPTH, i))
            blocks = blocks[:d] + [sample_block(space, i, rng) for _ in range(d - len(blocks))]
        h = st.embed_dim
        if rng.random() < cfg.p_embed:
            h = _pick(rng, space.choices(DimensionKind.EMBED_DIM, i))
        m = st.mlp_ratio
        if rng.random() < cfg.p_mutate:
            m = _pick(rng, space.choices(DimensionKind.MLP_RATIO, i))
        blocks = [sample_block(space, i, rng) if rng.random() < cfg.p_mutate else b for b in blocks]
        stages.append(Stage(h, m, tuple(blocks)))
    return Architecture(tuple(stages))


def evolutionary_search(space: SearchSpace, oracle, budget: ResourceBudget, cfg: SearchConfig, seed: int,
                        shape: ModelShape | None = None, workers: int = 1) -> SearchResult:
    """Elitist evolutionary search; candidates ranked by (error, params, encoding)."""
    rng = np.random.default_rng(seed)
    check_feasible(space, shape, budget)
    costs: dict[str, tuple[int, int]] = {}

    def cost(a: Architecture) -> tuple[int, int]:
        key = encode(a)
        if key not in costs:
            costs[key] = (param_count(a, shape), flop_count(a, shape)) if shape is not None else (0, 0)
        return costs[key]

    def errors(archs):
        if hasattr(oracle, "evaluate_many"):
            return oracle.evaluate_many(archs, workers)
        return [float(oracle(a)) for a in archs]

    def ok(a: Architecture) -> bool:
        return space.contains(a) and within_budget(a, shape, budget)

    population = sample_constrained(space, shape, budget, cfg.population, rng)
    rows: list[tuple[int, str, float, int, int]] = []
    best_curve: list[float] = []
    ranked: list[tuple[float, int, str, Architecture]] = []
    for gen in range(1, cfg.generations + 1):
        errs = errors(population)
        uniq = {}
        for a, e in zip(population, errs):
            key = encode(a)
            p, m = cost(a)
            rows.append((gen, key, e, p, m))
            uniq[key] = (e, p, key, a)
        ranked = sorted(uniq.values(), key=lambda r: r[:3])
        best_curve.append(ranked[0][0])
        if gen == cfg.generations:
            break
        top = [r[3] for r in ranked[:cfg.parents]]
        n_child = max(0, cfg.population - len(top))
        children: list[Architecture] = []
        want_cross = n_child // 2
        for _ in range(10 * max(want_cross, 1)):
            if len(children) >= want_cross:
                break
            i, j = rng.integers(len(top)), rng.integers(len(top))
            child = crossover(top[i], top[j], rng)
            if ok(child):
                children.append(child)
        want_mut = n_child - len(children)
        n_mut = 0
        for _ in range(10 * max(want_mut, 1)):
            if n_mut >= want_mut:
                break
            child = mutate(top[rng.integers(len(top))], space, cfg, rng)
            if ok(child):
                children.append(child)
                n_mut += 1
        population = top + children
        if len(population) < cfg.population:
            population += sample_constrained(space, shape, budget, cfg.population - len(population), rng)
    err, p, key, arch = ranked[0]
    return SearchResult(arch, err, p, cost(arch)[1], rows, best_curve)


def brute_force_argmin(archs, oracle, shape: ModelShape | None, budget: ResourceBudget) -> tuple[Architecture, float]:
    """Exhaustive feasible argmin under the same (error, params, encoding) order."""
    best = None
    for a in archs:
        if not within_budget(a, shape, budget):
            continue
        key = (float(oracle(a)), param_count(a, shape) if shape is not None else 0, encode(a))
        if best is None or key < best[0]:
            best = (key, a)
    if best is None:
        raise ConstraintInfeasible("no feasible architecture")
    return best[1], best[0][0]


def random_architectures(space: SearchSpace, n: int, seed: int) -> list[Architecture]:
    rng = np.random.default_rng(seed)
    return [sample_uniform(space, rng) for _ in range(n)]
