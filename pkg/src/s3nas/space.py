"""Search space, architectures, sampling and the canonical text encoding.

A space is the Cartesian product of 24 subspaces: six dimension kinds for
each of four stages. Depth, embed dim and MLP ratio are chosen once per stage;
window, heads and Q-K-V dim are chosen per block.

Canonical encoding, one line, stages joined by ``/``::

    d=2;h=16;m=2;w=4:n=2:q=16,w=2:n=1:q=8/d=1;h=32;m=1.5;w=2:n=2:q=16/...

MLP ratios are multiples of 0.5 and print with ``%g`` (``2``, ``3.5``).
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

NUM_STAGES = 4
MAX_SAMPLE_ATTEMPTS = 1000


class DimensionKind(str, enum.Enum):
    DEPTH = "depth"
    EMBED_DIM = "embed_dim"
    MLP_RATIO = "mlp_ratio"
    WINDOW_SIZE = "window_size"
    NUM_HEADS = "num_heads"
    QKV_DIM = "qkv_dim"

    @property
    def stage_level(self) -> bool:
        return self in STAGE_KINDS

    @property
    def lower_bound(self) -> float:
        """Smallest admissible value; every kind but depth must be strictly positive."""
        return 1 if self is DimensionKind.DEPTH else 0


STAGE_KINDS = (DimensionKind.DEPTH, DimensionKind.EMBED_DIM, DimensionKind.MLP_RATIO)
BLOCK_KINDS = (DimensionKind.WINDOW_SIZE, DimensionKind.NUM_HEADS, DimensionKind.QKV_DIM)
ALL_KINDS = STAGE_KINDS + BLOCK_KINDS

class SpaceError(ValueError):
    pass


class InvalidArchitecture(ValueError):
    pass


class SamplingExhausted(RuntimeError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


def coerce_value(kind: DimensionKind, v) -> int | float:
    if kind is DimensionKind.MLP_RATIO:
        f = float(v)
        if not float(2 * f).is_integer():
            raise SpaceError(f"mlp ratio {v} is not a multiple of 0.5")
        return f
    if float(v) != int(v):
        raise SpaceError(f"{kind.value} value {v} is not an integer")
    return int(v)


def format_value(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class Subspace:
    kind: DimensionKind
    stage: int
    choices: tuple
    step: float

    def __post_init__(self):
        kind = DimensionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        choices = tuple(coerce_value(kind, v) for v in self.choices)
        object.__setattr__(self, "choices", choices)
        object.__setattr__(self, "step", coerce_value(kind, self.step))
        if not 1 <= self.stage <= NUM_STAGES:
            raise SpaceError(f"stage {self.stage} outside 1..{NUM_STAGES}")
        if not choices:
            raise SpaceError(f"{kind.value}/stage {self.stage}: empty choice set")
        if any(b <= a for a, b in zip(choices, choices[1:])):
            raise SpaceError(f"{kind.value}/stage {self.stage}: choices must be strictly ascending")
        lb = kind.lower_bound
        if kind is DimensionKind.DEPTH:
            if choices[0] < lb:
                raise SpaceError(f"depth/stage {self.stage}: choices below 1")
        elif choices[0] <= lb:
            raise SpaceError(f"{kind.value}/stage {self.stage}: choices must be positive")
        if self.step <= 0:
            raise SpaceError(f"{kind.value}/stage {self.stage}: step must be positive")

    def __len__(self) -> int:
        return len(self.choices)


@dataclass(frozen=True)
class Block:
    window: int
    heads: int
    qkv: int

    def value(self, kind: DimensionKind):
        return {DimensionKind.WINDOW_SIZE: self.window,
                DimensionKind.NUM_HEADS: self.heads,
                DimensionKind.QKV_DIM: self.qkv}[kind]


@dataclass(frozen=True)
class Stage:
    embed_dim: int
    mlp_ratio: float
    blocks: tuple[Block, ...]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def ffn_dim(self) -> int:
        return math.ceil(self.mlp_ratio * self.embed_dim)

    def value(self, kind: DimensionKind):
        if kind is DimensionKind.DEPTH:
            return self.depth
        if kind is DimensionKind.EMBED_DIM:
            return self.embed_dim
        if kind is DimensionKind.MLP_RATIO:
            return self.mlp_ratio
        raise KeyError(kind)


@dataclass(frozen=True)
class Architecture:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise InvalidArchitecture(f"expected {NUM_STAGES} stages, got {len(self.stages)}")
        for i, st in enumerate(self.stages, 1):
            if st.depth < 1:
                raise InvalidArchitecture(f"stage {i}: depth must be >= 1")
            if st.embed_dim <= 0 or st.mlp_ratio <= 0:
                raise InvalidArchitecture(f"stage {i}: nonpositive stage dimension")
            for j, b in enumerate(st.blocks, 1):
                if min(b.window, b.heads, b.qkv) <= 0:
                    raise InvalidArchitecture(f"stage {i} block {j}: nonpositive block dimension")
                if b.qkv % b.heads:
                    raise InvalidArchitecture(
                        f"stage {i} block {j}: qkv {b.qkv} not divisible by heads {b.heads}")

    def values(self, kind: DimensionKind, stage: int) -> list:
        """All values of ``kind`` used in ``stage`` (1-based); one entry for stage-level kinds."""
        st = self.stages[stage - 1]
        if kind.stage_level:
            return [st.value(kind)]
        return [b.value(kind) for b in st.blocks]

    def encode(self) -> str:
        return encode(self)

    def __lt__(self, other: "Architecture") -> bool:
        return encode(self) < encode(other)


def encode(arch: Architecture) -> str:
    parts = []
    for st in arch.stages:
        blocks = ",".join(f"w={b.window}:n={b.heads}:q={b.qkv}" for b in st.blocks)
        parts.append(f"d={st.depth};h={st.embed_dim};m={format_value(st.mlp_ratio)};{blocks}")
    return "/".join(parts)


class _Reader:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def expect(self, lit: str) -> None:
        if not self.text.startswith(lit, self.pos):
            raise ParseError(f"expected {lit!r}", self.pos)
        self.pos += len(lit)

    def number(self, allow_frac: bool = False):
        start = self.pos
        allowed = "0123456789." if allow_frac else "0123456789"
        while self.pos < len(self.text) and self.text[self.pos] in allowed:
            self.pos += 1
        tok = self.text[start:self.pos]
        if not tok or tok.count(".") > 1 or tok.startswith(".") or tok.endswith("."):
            raise ParseError("expected a number", start)
        return float(tok) if allow_frac else int(tok)

    def peek(self, lit: str) -> bool:
        return self.text.startswith(lit, self.pos)


def decode(text: str) -> Architecture:
    r = _Reader(text)
    stages = []
    for i in range(NUM_STAGES):
        if i:
            r.expect("/")
        stage_pos = r.pos
        r.expect("d=")
        depth = r.number()
        r.expect(";h=")
        h = r.number()
        r.expect(";m=")
        mpos = r.pos
        m = r.number(allow_frac=True)
        if not float(2 * m).is_integer():
            raise ParseError("mlp ratio must be a multiple of 0.5", mpos)
        r.expect(";")
        blocks = []
        while True:
            r.expect("w=")
            w = r.number()
            r.expect(":n=")
            n = r.number()
            r.expect(":q=")
            q = r.number()
            blocks.append(Block(w, n, q))
            if r.peek(","):
                r.pos += 1
                continue
            break
        if len(blocks) != depth:
            raise ParseError(f"stage {i + 1} declares depth {depth} but has {len(blocks)} blocks",
                             stage_pos)
        stages.append(Stage(h, m, tuple(blocks)))
    if r.pos != len(text):
        raise ParseError("trailing characters", r.pos)
    try:
        return Architecture(tuple(stages))
    except InvalidArchitecture as exc:
        raise ParseError(str(exc), 0) from None


@dataclass(frozen=True)
class SpaceLimit:
    max_size: int

    def __post_init__(self):
        if self.max_size < 1:
            raise SpaceError("max_size must be >= 1")


@dataclass(frozen=True)
class SearchSpace:
    subspaces: tuple[Subspace, ...]
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        index = {}
        for s in self.subspaces:
            key = (s.kind, s.stage)
            if key in index:
                raise SpaceError(f"duplicate subspace {s.kind.value}/stage {s.stage}")
            index[key] = s
        missing = [(k.value, i) for i in range(1, NUM_STAGES + 1) for k in ALL_KINDS
                   if (k, i) not in index]
        if missing:
            raise SpaceError(f"missing subspaces: {missing}")
        object.__setattr__(self, "_index", index)
        ordered = tuple(index[(k, i)] for i in range(1, NUM_STAGES + 1) for k in ALL_KINDS)
        object.__setattr__(self, "subspaces", ordered)

    stage_count = NUM_STAGES

    def get(self, kind: DimensionKind, stage: int) -> Subspace:
        return self._index[(DimensionKind(kind), stage)]

    def choices(self, kind: DimensionKind, stage: int) -> tuple:
        return self.get(kind, stage).choices

    def replace(self, *new: Subspace) -> "SearchSpace":
        index = dict(self._index)
        for s in new:
            index[(s.kind, s.stage)] = s
        return SearchSpace(tuple(index.values()))

    def contains(self, arch: Architecture) -> bool:
        try:
            self.validate(arch)
        except InvalidArchitecture:
            return False
        return True

    def validate(self, arch: Architecture) -> None:
        for i in range(1, NUM_STAGES + 1):
            for kind in ALL_KINDS:
                allowed = self.choices(kind, i)
                for v in arch.values(kind, i):
                    if v not in allowed:
                        raise InvalidArchitecture(
                            f"stage {i}: {kind.value}={format_value(v)} not in {list(allowed)}")

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        steps = {}
        for k in ALL_KINDS:
            per_stage = {self.get(k, i).step for i in range(1, NUM_STAGES + 1)}
            steps[k.value] = self.get(k, 1).step if len(per_stage) == 1 else [
                self.get(k, i).step for i in range(1, NUM_STAGES + 1)]
        return {
            "stages": [{k.value: list(self.choices(k, i)) for k in ALL_KINDS}
                       for i in range(1, NUM_STAGES + 1)],
            "steps": steps,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        """Build from the JSON space document (see README for the schema)."""
        stages = doc.get("stages")
        if not isinstance(stages, list) or len(stages) != NUM_STAGES:
            raise SpaceError(f"'stages' must be a list of {NUM_STAGES} objects")
        steps = doc.get("steps", {})
        subs = []
        for i, st in enumerate(stages, 1):
            for k in ALL_KINDS:
                if k.value not in st:
                    raise SpaceError(f"stages[{i - 1}] lacks {k.value!r}")
                if k.value not in steps:
                    raise SpaceError(f"steps lacks {k.value!r}")
                step = steps[k.value]
                if isinstance(step, list):
                    step = step[i - 1]
                subs.append(Subspace(k, i, tuple(st[k.value]), step))
        return cls(tuple(subs))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "SearchSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def uniform_space(depth, embed, mlp, window, heads, qkv, steps: dict | None = None) -> SearchSpace:
    """Same choice sets for every stage."""
    steps = steps or {k: 1 for k in ALL_KINDS}
    vals = dict(zip(ALL_KINDS, (depth, embed, mlp, window, heads, qkv)))
    subs = [Subspace(k, i, tuple(vals[k]), steps[k]) for i in range(1, NUM_STAGES + 1) for k in ALL_KINDS]
    return SearchSpace(tuple(subs))


def large_initial_space() -> SearchSpace:
    """The large-scale initial space (heads/mlp sets assigned as documented in the README)."""
    return uniform_space(
        depth=(2, 3, 4), embed=(224, 256, 288), mlp=(3, 3.5, 4), window=(7, 14),
        heads=(7, 8, 9), qkv=(224, 256, 288),
        steps={DimensionKind.DEPTH: 1, DimensionKind.EMBED_DIM: 64, DimensionKind.MLP_RATIO: 0.5,
               DimensionKind.QKV_DIM: 64, DimensionKind.WINDOW_SIZE: 7, DimensionKind.NUM_HEADS: 1},
    )


def cardinality(space: SearchSpace) -> int:
    """Size of the Cartesian product (block triples counted regardless of divisibility)."""
    total = 1
    for i in range(1, NUM_STAGES + 1):
        per_block = (len(space.get(DimensionKind.WINDOW_SIZE, i))
                     * len(space.get(DimensionKind.NUM_HEADS, i))
                     * len(space.get(DimensionKind.QKV_DIM, i)))
        total *= (len(space.get(DimensionKind.EMBED_DIM, i)) * len(space.get(DimensionKind.MLP_RATIO, i))
                  * sum(per_block ** d for d in space.choices(DimensionKind.DEPTH, i)))
    return total


def valid_blocks(space: SearchSpace, stage: int) -> list[Block]:
    return [Block(w, n, q)
            for w in space.choices(DimensionKind.WINDOW_SIZE, stage)
            for n in space.choices(DimensionKind.NUM_HEADS, stage)
            for q in space.choices(DimensionKind.QKV_DIM, stage)
            if q % n == 0]


def sample_block(space: SearchSpace, stage: int, rng: np.random.Generator) -> Block:
    ws = space.choices(DimensionKind.WINDOW_SIZE, stage)
    ns = space.choices(DimensionKind.NUM_HEADS, stage)
    qs = space.choices(DimensionKind.QKV_DIM, stage)
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        w = ws[rng.integers(len(ws))]
        n = ns[rng.integers(len(ns))]
        q = qs[rng.integers(len(qs))]
        if q % n == 0:
            return Block(w, n, q)
    raise SamplingExhausted(
        f"stage {stage}: no heads/qkv pair with integral head dim after {MAX_SAMPLE_ATTEMPTS} draws")


def sample_stage(space: SearchSpace, stage: int, rng: np.random.Generator) -> Stage:
    pick = lambda kind: (lambda c: c[rng.integers(len(c))])(space.choices(kind, stage))  # noqa: E731
    depth = pick(DimensionKind.DEPTH)
    h = pick(DimensionKind.EMBED_DIM)
    m = pick(DimensionKind.MLP_RATIO)
    return Stage(h, m, tuple(sample_block(space, stage, rng) for _ in range(depth)))


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> Architecture:
    return Architecture(tuple(sample_stage(space, i, rng) for i in range(1, NUM_STAGES + 1)))


def enumerate_architectures(space: SearchSpace) -> Iterator[Architecture]:
    """Every valid architecture of ``space`` (divisibility-violating blocks skipped)."""
    per_stage = []
    for i in range(1, NUM_STAGES + 1):
        blocks = valid_blocks(space, i)
        options = []
        for d in space.choices(DimensionKind.DEPTH, i):
            for h in space.choices(DimensionKind.EMBED_DIM, i):
                for m in space.choices(DimensionKind.MLP_RATIO, i):
                    for combo in itertools.product(blocks, repeat=d):
                        options.append(Stage(h, m, combo))
        per_stage.append(options)
    for stages in itertools.product(*per_stage):
        yield Architecture(stages)


def extreme_architecture(space: SearchSpace, largest: bool) -> Architecture:
    """All dimensions maximal (or minimal); heads fall back to the nearest valid divisor of qkv."""
    pick = max if largest else min
    stages = []
    for i in range(1, NUM_STAGES + 1):
        blocks = valid_blocks(space, i)
        if not blocks:
            raise SamplingExhausted(f"stage {i}: no valid block")
        sign = 1 if largest else -1
        # extreme qkv first, then heads, then window
        best = max(blocks, key=lambda b: (sign * b.qkv, sign * b.heads, sign * b.window))
        depth = pick(space.choices(DimensionKind.DEPTH, i))
        stages.append(Stage(pick(space.choices(DimensionKind.EMBED_DIM, i)),
                            pick(space.choices(DimensionKind.MLP_RATIO, i)),
                            (best,) * depth))
    return Architecture(tuple(stages))


def partition_by_choice(samples: Sequence[tuple[Architecture, float]], kind: DimensionKind,
                        stage: int) -> dict:
    """Group sample errors by the value ``kind`` takes in ``stage``.

    Block-level kinds put a sample into every group whose value any of its
    blocks in that stage uses. Keys come back in ascending order.
    """
    kind = DimensionKind(kind)
    groups: dict = {}
    for arch, err in samples:
        for v in sorted(set(arch.values(kind, stage))):
            groups.setdefault(v, []).append(err)
    return dict(sorted(groups.items()))


def with_stage(arch: Architecture, stage: int, new: Stage) -> Architecture:
    stages = list(arch.stages)
    stages[stage - 1] = new
    return Architecture(tuple(stages))


__all__ = [
    "ALL_KINDS", "BLOCK_KINDS", "STAGE_KINDS", "NUM_STAGES", "Architecture", "Block", "DimensionKind",
    "InvalidArchitecture", "ParseError", "SamplingExhausted", "SearchSpace", "SpaceError", "SpaceLimit",
    "Stage", "Subspace", "cardinality", "decode", "encode", "enumerate_architectures",
    "extreme_architecture", "large_initial_space", "partition_by_choice", "sample_block",
    "sample_stage", "sample_uniform", "uniform_space", "valid_blocks", "with_stage",
]
