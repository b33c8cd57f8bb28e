"""Space quality: constrained sampling, E-T error and error EDFs.

Two performance oracles map an architecture to a top-1 error in [0, 1]:
:class:`SupernetOracle` evaluates inherited weights on a validation set, and
:class:`TabularOracle` is a closed-form landscape with known per-dimension
tendencies, used to check the search loops against brute force.
"""

from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .cost import ModelShape, ResourceBudget, within_budget
from .space import (NUM_STAGES, Architecture, DimensionKind, SearchSpace, encode,
                    extreme_architecture, sample_uniform)


class ConstraintInfeasible(RuntimeError):
    def __init__(self, message: str, attempts: int = 0, accepted: int = 0):
        super().__init__(message)
        self.attempts = attempts
        self.accepted = accepted


class EmptySample(ValueError):
    pass


class PerformanceOracle(Protocol):
    def __call__(self, arch: Architecture) -> float: ...


class CachedOracle:
    """Memoizes an error function by canonical encoding."""

    def __init__(self, fn):
        self.fn = fn
        self.cache: dict[str, float] = {}

    def __call__(self, arch: Architecture) -> float:
        key = encode(arch)
        if key not in self.cache:
            self.cache[key] = float(self.fn(arch))
        return self.cache[key]

    def evaluate_many(self, archs: Sequence[Architecture], workers: int = 1) -> list[float]:
        todo = sorted({encode(a): a for a in archs if encode(a) not in self.cache}.items())
        if workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(workers) as pool:
                errs = list(pool.map(self.fn, [a for _, a in todo]))
        else:
            errs = [self.fn(a) for _, a in todo]
        for (key, _), e in zip(todo, errs):
            self.cache[key] = float(e)
        return [self.cache[encode(a)] for a in archs]

    def for_space(self, space: SearchSpace, iteration: int) -> "CachedOracle":
        return self


class SupernetOracle(CachedOracle):
    """Top-1 val error of subnets with weights inherited from a trained supernet.

    The supernet weights must not be trained while this oracle is in use.
    """

    def __init__(self, net, val, batch_size: int = 256):
        from .supernet import evaluate

        self.net = net
        self.val = val
        super().__init__(lambda arch: evaluate(net, arch, val, batch_size))


def _unit_hash(text: str, salt: int) -> float:
    digest = hashlib.blake2b(f"{salt}:{text}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


@dataclass(frozen=True)
class TabularConfig:
    """``err = clamp(base - sum_d gain_d * phi_d + noise * (2u - 1), 0, 1)``.

    ``phi`` is the stage value for stage-level kinds and the mean over the
    stage's blocks for block-level kinds. A positive gain means larger values
    lower the error. ``u`` is a hash of the encoding, uniform on [0, 1).
    """

    base: float = 0.5
    gains: Mapping[tuple[DimensionKind, int], float] = field(default_factory=dict)
    noise: float = 0.0
    salt: int = 0

    def to_dict(self) -> dict:
        return {"base": self.base, "noise": self.noise, "salt": self.salt,
                "gains": [{"kind": k.value, "stage": s, "gain": g}
                          for (k, s), g in sorted(self.gains.items(), key=lambda kv: (kv[0][1], kv[0][0].value))]}

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularConfig":
        gains = {(DimensionKind(g["kind"]), int(g["stage"])): float(g["gain"]) for g in doc.get("gains", [])}
        return cls(float(doc.get("base", 0.5)), gains, float(doc.get("noise", 0.0)), int(doc.get("salt", 0)))


class TabularOracle(CachedOracle):
    def __init__(self, config: TabularConfig):
        self.config = config
        super().__init__(self._error)

    def feature(self, arch: Architecture, kind: DimensionKind, stage: int) -> float:
        vals = arch.values(kind, stage)
        return sum(vals) / len(vals)

    def _error(self, arch: Architecture) -> float:
        c = self.config
        e = c.base - sum(g * self.feature(arch, k, s) for (k, s), g in c.gains.items())
        if c.noise:
            e += c.noise * (2.0 * _unit_hash(encode(arch), c.salt) - 1.0)
        return min(1.0, max(0.0, e))

    def error_slope(self, kind: DimensionKind, stage: int) -> float:
        """d(err)/d(phi) before clamping; its sign is the configured direction."""
        return -self.config.gains.get((DimensionKind(kind), stage), 0.0)


# ---------------------------------------------------------------------------
# sampling and E-T error
# ---------------------------------------------------------------------------

@dataclass
class SampleStats:
    attempts: int
    accepted: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0


def sample_constrained(space: SearchSpace, shape: ModelShape | None, budget: ResourceBudget, n: int,
                       rng: np.random.Generator, stats: SampleStats | None = None) -> list[Architecture]:
    """``n`` uniform architectures with ``g(arch) < c`` by rejection (at most 1000 * n draws)."""
    stats = stats if stats is not None else SampleStats(0, 0)
    out: list[Architecture] = []
    limit = 1000 * max(n, 1)
    while len(out) < n:
        if stats.attempts >= limit:
            raise ConstraintInfeasible(
                f"accepted {stats.accepted} of {stats.attempts} draws "
                f"(rate {stats.acceptance_rate:.2e}); budget {budget} looks infeasible",
                stats.attempts, stats.accepted)
        stats.attempts += 1
        arch = sample_uniform(space, rng)
        if within_budget(arch, shape, budget):
            stats.accepted += 1
            out.append(arch)
    return out


def check_feasible(space: SearchSpace, shape: ModelShape | None, budget: ResourceBudget) -> None:
    """Fail fast when even the smallest architecture breaks the budget."""
    smallest = extreme_architecture(space, largest=False)
    if not within_budget(smallest, shape, budget):
        raise ConstraintInfeasible(f"smallest architecture of the space violates budget {budget}")


def default_top_k(n: int) -> int:
    return max(1, min(50, math.ceil(0.05 * n)))


@dataclass(frozen=True)
class EtReport:
    samples: tuple[tuple[str, float], ...]  # (encoding, error)
    q_e: float
    q_t: float
    q: float
    top_k: int
    budget: ResourceBudget = ResourceBudget()

    @property
    def errors(self) -> list[float]:
        return [e for _, e in self.samples]

    def to_dict(self) -> dict:
        return {"q_e": self.q_e, "q_t": self.q_t, "q": self.q, "top_k": self.top_k,
                "budget": {"max_params": self.budget.max_params, "max_flops": self.budget.max_flops},
                "samples": [{"arch": a, "error": e} for a, e in self.samples]}

    @classmethod
    def from_dict(cls, doc: dict) -> "EtReport":
        b = doc.get("budget", {})
        return cls(tuple((s["arch"], s["error"]) for s in doc["samples"]), doc["q_e"], doc["q_t"], doc["q"],
                   doc["top_k"], ResourceBudget(b.get("max_params"), b.get("max_flops")))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def et_error(samples: Iterable, top_k: int | None = None,
             budget: ResourceBudget = ResourceBudget()) -> EtReport:
    """E-T error of a sample: mean of the average error and the average of the best ``top_k``.

    ``samples`` holds ``(Architecture | encoding, error)`` pairs or bare errors.
    """
    pairs = []
    for s in samples:
        if isinstance(s, tuple):
            a, e = s
            pairs.append((encode(a) if isinstance(a, Architecture) else str(a), float(e)))
        else:
            pairs.append(("", float(s)))
    if not pairs:
        raise EmptySample("E-T error needs at least one sample")
    pairs.sort()
    n = len(pairs)
    k = default_top_k(n) if top_k is None else top_k
    if not 1 <= k <= n:
        raise ValueError(f"top_k={k} outside 1..{n}")
    # errors are rationals (misclassified / N); average them exactly and round once
    errs = sorted(Fraction(repr(e)) for _, e in pairs)
    q_e = sum(errs, Fraction(0)) / n
    q_t = sum(errs[:k], Fraction(0)) / k
    return EtReport(tuple(pairs), float(q_e), float(q_t), float((q_e + q_t) / 2), k, budget)


def edf(errors: Sequence[float]) -> list[tuple[float, float]]:
    """Error EDF ``F(e) = #{e_i <= e} / N`` at each distinct sample error."""
    if len(errors) == 0:
        raise EmptySample("EDF needs at least one error")
    xs = np.sort(np.asarray(errors, dtype=np.float64))
    uniq = np.unique(xs)
    counts = np.searchsorted(xs, uniq, side="right")
    return [(float(u), float(c) / len(xs)) for u, c in zip(uniq, counts)]


def edf_at(errors: Sequence[float], x: float) -> float:
    xs = np.sort(np.asarray(errors, dtype=np.float64))
    return float(np.searchsorted(xs, x, side="right")) / len(xs)


def measure_space(space: SearchSpace, oracle, shape: ModelShape | None, budget: ResourceBudget, n: int,
                  rng: np.random.Generator, top_k: int | None = None,
                  workers: int = 1) -> tuple[list[tuple[Architecture, float]], EtReport]:
    archs = sample_constrained(space, shape, budget, n, rng)
    if hasattr(oracle, "evaluate_many"):
        errs = oracle.evaluate_many(archs, workers)
    else:
        errs = [float(oracle(a)) for a in archs]
    samples = list(zip(archs, errs))
    return samples, et_error(samples, top_k, budget)


def stage_kind_edfs(samples: Sequence[tuple[Architecture, float]], kind: DimensionKind = DimensionKind.DEPTH):
    """Per-stage, per-choice EDFs (the depth-focused view of an evolved space)."""
    from .space import partition_by_choice

    out = {}
    for stage in range(1, NUM_STAGES + 1):
        for value, errs in partition_by_choice(samples, kind, stage).items():
            out[(stage, value)] = edf(errs)
    return out

