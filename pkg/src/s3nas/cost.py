"""Closed-form parameter and MAC counts for the windowed transformer.

Layout, per stage ``i`` with feature side ``s_i = side / patch / 2**(i-1)``:

* patch embed: linear ``p*p*C -> h_1`` with bias
* each block: LN, QKV linear ``h -> 3q``, windowed attention with a
  ``(2w-1)**2 x n`` relative-bias table, out linear ``q -> h``, LN, FFN
  ``h -> ceil(m*h) -> h`` (all linears biased)
* between stages: 2x2 patch merge (concat 4 neighbours, LN over ``4h_i``,
  linear ``4h_i -> h_{i+1}`` with bias)
* head: LN, token mean-pool, linear ``h_4 -> K``

MACs count matrix products only (1 MAC = 1 FLOP); softmax, layernorm, gelu,
bias adds and pooling are free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .space import NUM_STAGES, Architecture, InvalidArchitecture


@dataclass(frozen=True)
class ModelShape:
    side: int = 32
    channels: int = 1
    patch: int = 2
    classes: int = 4

    def __post_init__(self):
        if min(self.side, self.channels, self.patch, self.classes) <= 0:
            raise ValueError("model shape fields must be positive")
        if self.side % self.patch:
            raise ValueError(f"side {self.side} not divisible by patch {self.patch}")
        base = self.side // self.patch
        if base % 2 ** (NUM_STAGES - 1):
            raise ValueError(f"token grid {base} cannot be halved {NUM_STAGES - 1} times")

    def stage_side(self, stage: int) -> int:
        return self.side // self.patch // 2 ** (stage - 1)


@dataclass(frozen=True)
class ResourceBudget:
    max_params: int | None = None
    max_flops: int | None = None

    @property
    def unbounded(self) -> bool:
        return self.max_params is None and self.max_flops is None


def check_shape(arch: Architecture, shape: ModelShape) -> None:
    for i, st in enumerate(arch.stages, 1):
        s = shape.stage_side(i)
        for j, b in enumerate(st.blocks, 1):
            if s % b.window:
                raise InvalidArchitecture(
                    f"stage {i} block {j}: window {b.window} does not divide feature side {s}")


def block_params(h: int, ffn: int, window: int, heads: int, qkv: int) -> int:
    return (2 * h + 2 * h                        # two layernorms
            + h * 3 * qkv + 3 * qkv              # qkv projection
            + qkv * h + h                        # output projection
            + (2 * window - 1) ** 2 * heads      # relative bias table
            + h * ffn + ffn + ffn * h + h)       # ffn


def param_count(arch: Architecture, shape: ModelShape) -> int:
    check_shape(arch, shape)
    st = arch.stages
    total = shape.patch ** 2 * shape.channels * st[0].embed_dim + st[0].embed_dim
    for i, stage in enumerate(st):
        h = stage.embed_dim
        for b in stage.blocks:
            total += block_params(h, stage.ffn_dim, b.window, b.heads, b.qkv)
        if i + 1 < len(st):
            nxt = st[i + 1].embed_dim
            total += 2 * 4 * h + 4 * h * nxt + nxt
    h4 = st[-1].embed_dim
    total += 2 * h4 + h4 * shape.classes + shape.classes
    return total


def attention_macs(tokens: int, window: int, qkv: int) -> int:
    u = window * window
    return 2 * (tokens // u) * u * u * qkv


def flop_count(arch: Architecture, shape: ModelShape) -> int:
    """Multiply-accumulates for one image."""
    check_shape(arch, shape)
    st = arch.stages
    t1 = shape.stage_side(1) ** 2
    total = t1 * shape.patch ** 2 * shape.channels * st[0].embed_dim
    for i, stage in enumerate(st, 1):
        t = shape.stage_side(i) ** 2
        h = stage.embed_dim
        for b in stage.blocks:
            total += t * h * 3 * b.qkv
            total += attention_macs(t, b.window, b.qkv)
            total += t * b.qkv * h
            total += 2 * t * h * stage.ffn_dim
        if i < len(st):
            total += shape.stage_side(i + 1) ** 2 * 4 * h * st[i].embed_dim
    total += st[-1].embed_dim * shape.classes
    return total


def within_budget(arch: Architecture, shape: ModelShape | None, budget: ResourceBudget) -> bool:
    """Strict ``g(arch) < c`` on every bounded side."""
    if budget.unbounded:
        return True
    if shape is None:
        raise ValueError("a bounded budget needs a model shape")
    if budget.max_params is not None and param_count(arch, shape) >= budget.max_params:
        return False
    if budget.max_flops is not None and flop_count(arch, shape) >= budget.max_flops:
        return False
    return True


def ffn_width(mlp_ratio: float, embed_dim: int) -> int:
    return math.ceil(mlp_ratio * embed_dim)
