"""Elastic windowed vision transformer with weight entanglement.

The supernet stores every tensor at its maximal shape. A subnet runs on
*leading* slices of those tensors (first ``h`` input dims, first ``3q`` QKV
rows, first ``ceil(m*h)`` FFN units, first ``n`` heads), except the relative
position bias table, which is sliced as the *central* ``(2w-1)**2`` block so
the zero-displacement entry stays shared across window sizes.

Patch-merge weights are stored as ``(h_next, 4, h)`` so that shrinking ``h``
keeps each neighbour's leading channels aligned.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensorcore as tc
from .cost import ModelShape
from .data import Dataset
from .space import (NUM_STAGES, Architecture, DimensionKind, InvalidArchitecture, SearchSpace,
                    extreme_architecture, sample_uniform)
from .tensorcore import Tensor

INIT_STD = 0.02
LN_EPS = 1e-5


class OutOfBounds(InvalidArchitecture):
    def __init__(self, dimension: str, stage: int, value, bound):
        super().__init__(f"stage {stage}: {dimension}={value} exceeds supernet bound {bound}")
        self.dimension = dimension


class WindowMismatch(InvalidArchitecture):
    pass


@dataclass(frozen=True)
class ElasticBounds:
    """Per-stage maxima the supernet tensors are allocated for."""

    shape: ModelShape
    depth: tuple[int, ...]
    embed_dim: tuple[int, ...]
    mlp_ratio: tuple[float, ...]
    window: tuple[int, ...]
    heads: tuple[int, ...]
    qkv: tuple[int, ...]

    @classmethod
    def from_space(cls, space: SearchSpace, shape: ModelShape) -> "ElasticBounds":
        mx = lambda kind: tuple(max(space.choices(kind, i)) for i in range(1, NUM_STAGES + 1))  # noqa: E731
        return cls(shape, mx(DimensionKind.DEPTH), mx(DimensionKind.EMBED_DIM), mx(DimensionKind.MLP_RATIO),
                   mx(DimensionKind.WINDOW_SIZE), mx(DimensionKind.NUM_HEADS), mx(DimensionKind.QKV_DIM))

    def ffn_dim(self, stage: int) -> int:
        return math.ceil(self.mlp_ratio[stage - 1] * self.embed_dim[stage - 1])

    def covers(self, space: SearchSpace) -> bool:
        other = ElasticBounds.from_space(space, self.shape)
        return all(all(a <= b for a, b in zip(getattr(other, f), getattr(self, f)))
                   for f in ("depth", "embed_dim", "mlp_ratio", "window", "heads", "qkv"))

    def check(self, arch: Architecture) -> None:
        for i, st in enumerate(arch.stages, 1):
            k = i - 1
            if st.depth > self.depth[k]:
                raise OutOfBounds("depth", i, st.depth, self.depth[k])
            if st.embed_dim > self.embed_dim[k]:
                raise OutOfBounds("embed_dim", i, st.embed_dim, self.embed_dim[k])
            if st.ffn_dim > self.ffn_dim(i):
                raise OutOfBounds("mlp_ratio", i, st.mlp_ratio, self.mlp_ratio[k])
            side = self.shape.stage_side(i)
            for b in st.blocks:
                if b.window > self.window[k]:
                    raise OutOfBounds("window_size", i, b.window, self.window[k])
                if b.heads > self.heads[k]:
                    raise OutOfBounds("num_heads", i, b.heads, self.heads[k])
                if b.qkv > self.qkv[k]:
                    raise OutOfBounds("qkv_dim", i, b.qkv, self.qkv[k])
                if side % b.window:
                    raise WindowMismatch(f"stage {i}: window {b.window} does not divide side {side}")

    def max_shapes(self) -> dict[str, tuple[int, ...]]:
        s = self.shape
        shapes = {"patch.w": (self.embed_dim[0], s.channels * s.patch * s.patch),
                  "patch.b": (self.embed_dim[0],)}
        for i in range(1, NUM_STAGES + 1):
            h, q, f = self.embed_dim[i - 1], self.qkv[i - 1], self.ffn_dim(i)
            r = 2 * self.window[i - 1] - 1
            for j in range(1, self.depth[i - 1] + 1):
                p = f"s{i}.b{j}."
                shapes.update({
                    p + "ln1.g": (h,), p + "ln1.b": (h,),
                    p + "qkv.w": (3 * q, h), p + "qkv.b": (3 * q,),
                    p + "proj.w": (h, q), p + "proj.b": (h,),
                    p + "relbias": (r, r, self.heads[i - 1]),
                    p + "ln2.g": (h,), p + "ln2.b": (h,),
                    p + "fc1.w": (f, h), p + "fc1.b": (f,),
                    p + "fc2.w": (h, f), p + "fc2.b": (h,),
                })
            if i < NUM_STAGES:
                nxt = self.embed_dim[i]
                shapes.update({f"m{i}.ln.g": (4, h), f"m{i}.ln.b": (4, h),
                               f"m{i}.w": (nxt, 4, h), f"m{i}.b": (nxt,)})
        h4 = self.embed_dim[-1]
        shapes.update({"head.ln.g": (h4,), "head.ln.b": (h4,),
                       "head.w": (s.classes, h4), "head.b": (s.classes,)})
        return shapes


def exact_bounds(arch: Architecture, shape: ModelShape) -> ElasticBounds:
    """Bounds that fit ``arch`` exactly (used to allocate standalone networks)."""
    st = arch.stages
    return ElasticBounds(
        shape, tuple(s.depth for s in st), tuple(s.embed_dim for s in st),
        tuple(s.mlp_ratio for s in st), tuple(max(b.window for b in s.blocks) for s in st),
        tuple(max(b.heads for b in s.blocks) for s in st), tuple(max(b.qkv for b in s.blocks) for s in st))


def init_weights(shapes: Mapping[str, tuple[int, ...]], seed: int) -> dict[str, np.ndarray]:
    """Layernorm scales 1, biases 0, everything else N(0, 0.02) clipped at 2 std."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shp in shapes.items():
        if name.endswith(".g"):
            out[name] = np.ones(shp, dtype=np.float32)
        elif name.endswith(".b"):
            out[name] = np.zeros(shp, dtype=np.float32)
        else:
            w = rng.normal(0.0, INIT_STD, size=shp)
            out[name] = np.clip(w, -2 * INIT_STD, 2 * INIT_STD).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# subnet parameter views
# ---------------------------------------------------------------------------

def _subnet_spec(arch: Architecture, bounds: ElasticBounds):
    """Yield (name, index tuple, exact shape) for every tensor ``arch`` uses."""
    s = bounds.shape
    h1 = arch.stages[0].embed_dim
    yield "patch.w", (slice(0, h1),), (h1, s.channels * s.patch * s.patch)
    yield "patch.b", (slice(0, h1),), (h1,)
    for i, st in enumerate(arch.stages, 1):
        h, f = st.embed_dim, st.ffn_dim
        for j, b in enumerate(st.blocks, 1):
            p = f"s{i}.b{j}."
            o = bounds.window[i - 1] - b.window
            r = 2 * b.window - 1
            lead_h = (slice(0, h),)
            yield p + "ln1.g", lead_h, (h,)
            yield p + "ln1.b", lead_h, (h,)
            yield p + "qkv.w", (slice(0, 3 * b.qkv), slice(0, h)), (3 * b.qkv, h)
            yield p + "qkv.b", (slice(0, 3 * b.qkv),), (3 * b.qkv,)
            yield p + "proj.w", (slice(0, h), slice(0, b.qkv)), (h, b.qkv)
            yield p + "proj.b", lead_h, (h,)
            yield p + "relbias", (slice(o, o + r), slice(o, o + r), slice(0, b.heads)), (r, r, b.heads)
            yield p + "ln2.g", lead_h, (h,)
            yield p + "ln2.b", lead_h, (h,)
            yield p + "fc1.w", (slice(0, f), slice(0, h)), (f, h)
            yield p + "fc1.b", (slice(0, f),), (f,)
            yield p + "fc2.w", (slice(0, h), slice(0, f)), (h, f)
            yield p + "fc2.b", lead_h, (h,)
        if i < NUM_STAGES:
            nxt = arch.stages[i].embed_dim
            yield f"m{i}.ln.g", (slice(0, 4), slice(0, h)), (4 * h,)
            yield f"m{i}.ln.b", (slice(0, 4), slice(0, h)), (4 * h,)
            yield f"m{i}.w", (slice(0, nxt), slice(0, 4), slice(0, h)), (nxt, 4 * h)
            yield f"m{i}.b", (slice(0, nxt),), (nxt,)
    h4 = arch.stages[-1].embed_dim
    yield "head.ln.g", (slice(0, h4),), (h4,)
    yield "head.ln.b", (slice(0, h4),), (h4,)
    yield "head.w", (slice(0, s.classes), slice(0, h4)), (s.classes, h4)
    yield "head.b", (slice(0, s.classes),), (s.classes,)


def standalone_shapes(arch: Architecture, shape: ModelShape) -> dict[str, tuple[int, ...]]:
    return {name: shp for name, _, shp in _subnet_spec(arch, exact_bounds(arch, shape))}


# ---------------------------------------------------------------------------
# forward pass over exact-size parameters
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def relative_index(window: int) -> np.ndarray:
    """(u, u) indices into the flattened ``(2w-1)**2`` table for a ``w x w`` window."""
    r, c = np.divmod(np.arange(window * window), window)
    dr = r[:, None] - r[None, :] + window - 1
    dc = c[:, None] - c[None, :] + window - 1
    return dr * (2 * window - 1) + dc


@functools.lru_cache(maxsize=None)
def grid_distances(window: int) -> np.ndarray:
    r, c = np.divmod(np.arange(window * window), window)
    return np.sqrt((r[:, None] - r[None, :]) ** 2 + (c[:, None] - c[None, :]) ** 2)


def window_attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, side: int, window: int,
                     heads: int, qkv: int, record: list | None = None, tag=None) -> Tensor:
    """Multi-head self-attention inside non-overlapping ``window x window`` tiles."""
    batch = x.shape[0]
    nw = side // window
    u = window * window
    hd = qkv // heads
    y = tc.linear(x, p[prefix + "qkv.w"], p[prefix + "qkv.b"])             # (B, t, 3q)
    y = tc.reshape(y, (batch, nw, window, nw, window, 3 * qkv))
    y = tc.transpose(y, (0, 1, 3, 2, 4, 5))
    y = tc.reshape(y, (batch * nw * nw, u, 3, heads, hd))
    y = tc.transpose(y, (2, 0, 3, 1, 4))                                    # (3, BW, n, u, hd)
    q, k, v = (tc.reshape(tc.slice_(y, (slice(a, a + 1),)), (batch * nw * nw, heads, u, hd))
               for a in range(3))
    scores = tc.mul(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    table = tc.reshape(p[prefix + "relbias"], ((2 * window - 1) ** 2, heads))
    bias = tc.transpose(tc.reshape(tc.take(table, relative_index(window)), (u, u, heads)), (2, 0, 1))
    attn = tc.softmax(tc.add(scores, bias), axis=-1)
    if record is not None:
        record.append((tag, window, attn.data.reshape(batch, nw * nw, heads, u, u)))
    out = tc.matmul(attn, v)                                                # (BW, n, u, hd)
    out = tc.transpose(out, (0, 2, 1, 3))
    out = tc.reshape(out, (batch, nw, nw, window, window, qkv))
    out = tc.transpose(out, (0, 1, 3, 2, 4, 5))
    out = tc.reshape(out, (batch, side * side, qkv))
    return tc.linear(out, p[prefix + "proj.w"], p[prefix + "proj.b"])


def patch_merge(x: Tensor, p: Mapping[str, Tensor], i: int, side: int, h: int) -> Tensor:
    batch = x.shape[0]
    half = side // 2
    y = tc.reshape(x, (batch, half, 2, half, 2, h))
    y = tc.transpose(y, (0, 1, 3, 2, 4, 5))
    y = tc.reshape(y, (batch, half * half, 4 * h))
    y = tc.layernorm(y, p[f"m{i}.ln.g"], p[f"m{i}.ln.b"], LN_EPS)
    return tc.linear(y, p[f"m{i}.w"], p[f"m{i}.b"])


def network_forward(p: Mapping[str, Tensor], arch: Architecture, shape: ModelShape,
                    images: np.ndarray | Tensor, record: list | None = None) -> Tensor:
    """Logits for ``images`` (B, C, S, S) given exact-size parameters ``p``."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=p["patch.w"].data.dtype))
    batch, ch, side, _ = x.shape
    if side != shape.side or ch != shape.channels:
        raise tc.ShapeMismatch("forward", x.shape, (batch, shape.channels, shape.side, shape.side))
    pt = shape.patch
    s = side // pt
    y = tc.reshape(x, (batch, ch, s, pt, s, pt))
    y = tc.transpose(y, (0, 2, 4, 1, 3, 5))
    y = tc.reshape(y, (batch, s * s, ch * pt * pt))
    x = tc.linear(y, p["patch.w"], p["patch.b"])
    for i, st in enumerate(arch.stages, 1):
        s = shape.stage_side(i)
        h = st.embed_dim
        for j, b in enumerate(st.blocks, 1):
            pre = f"s{i}.b{j}."
            y = tc.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"], LN_EPS)
            x = tc.add(x, window_attention(y, p, pre, s, b.window, b.heads, b.qkv, record, (i, j)))
            y = tc.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"], LN_EPS)
            y = tc.gelu(tc.linear(y, p[pre + "fc1.w"], p[pre + "fc1.b"]))
            x = tc.add(x, tc.linear(y, p[pre + "fc2.w"], p[pre + "fc2.b"]))
        if i < NUM_STAGES:
            x = patch_merge(x, p, i, s, h)
    x = tc.layernorm(x, p["head.ln.g"], p["head.ln.b"], LN_EPS)
    x = tc.mean(x, axis=1)
    return tc.linear(x, p["head.w"], p["head.b"])


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class Network:
    """A fixed-architecture network owning exact-size parameters."""

    def __init__(self, arch: Architecture, shape: ModelShape, params: Mapping[str, np.ndarray]):
        self.arch = arch
        self.shape = shape
        expected = standalone_shapes(arch, shape)
        for name, shp in expected.items():
            if tuple(params[name].shape) != shp:
                raise tc.ShapeMismatch(name, params[name].shape, shp)
        self.params = {name: Tensor(np.array(params[name], dtype=np.float32), requires_grad=True, name=name)
                       for name in expected}

    @classmethod
    def initialize(cls, arch: Architecture, shape: ModelShape, seed: int) -> "Network":
        return cls(arch, shape, init_weights(standalone_shapes(arch, shape), seed))

    def forward(self, images, record: list | None = None) -> Tensor:
        return network_forward(self.params, self.arch, self.shape, images, record)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_weights(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


class Supernet:
    def __init__(self, bounds: ElasticBounds, seed: int = 0,
                 weights: Mapping[str, np.ndarray] | None = None):
        self.bounds = bounds
        shapes = bounds.max_shapes()
        src = init_weights(shapes, seed) if weights is None else weights
        self.weights: dict[str, Tensor] = {}
        for name, shp in shapes.items():
            if tuple(src[name].shape) != shp:
                raise tc.ShapeMismatch(name, src[name].shape, shp)
            self.weights[name] = Tensor(np.array(src[name], dtype=np.float32), requires_grad=True, name=name)

    @classmethod
    def for_space(cls, space: SearchSpace, shape: ModelShape, seed: int = 0) -> "Supernet":
        return cls(ElasticBounds.from_space(space, shape), seed)

    @property
    def shape(self) -> ModelShape:
        return self.bounds.shape

    def parameters(self) -> list[Tensor]:
        return list(self.weights.values())

    def subnet_params(self, arch: Architecture) -> dict[str, Tensor]:
        self.bounds.check(arch)
        return {name: tc.reshape(tc.slice_(self.weights[name], idx), shp)
                for name, idx, shp in _subnet_spec(arch, self.bounds)}

    def forward(self, arch: Architecture, images, record: list | None = None) -> Tensor:
        return network_forward(self.subnet_params(arch), arch, self.shape, images, record)

    def extract(self, arch: Architecture) -> Network:
        """Standalone network holding copies of the slices ``arch`` inherits."""
        self.bounds.check(arch)
        params = {name: np.array(self.weights[name].data[idx]).reshape(shp)
                  for name, idx, shp in _subnet_spec(arch, self.bounds)}
        return Network(arch, self.shape, params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.weights.items()}

    @classmethod
    def grown_from(cls, other: "Supernet", bounds: ElasticBounds, seed: int = 0) -> "Supernet":
        """Fresh supernet for ``bounds`` that copies every region it shares with ``other``.

        Leading slices are shared, except the relative-bias tables which share
        their central square.
        """
        weights = init_weights(bounds.max_shapes(), seed)
        for name, dst in weights.items():
            if name not in other.weights:
                continue
            src = other.weights[name].data
            if name.endswith("relbias"):
                r = min(src.shape[0], dst.shape[0])
                so, do = (src.shape[0] - r) // 2, (dst.shape[0] - r) // 2
                n = min(src.shape[2], dst.shape[2])
                dst[do:do + r, do:do + r, :n] = src[so:so + r, so:so + r, :n]
            else:
                idx = tuple(slice(0, min(a, b)) for a, b in zip(src.shape, dst.shape))
                dst[idx] = src[idx]
        return cls(bounds, weights=weights)

    def save(self, path: str | Path) -> None:
        tc.save_checkpoint(self.state_dict(), path)

    @classmethod
    def load(cls, path: str | Path, bounds: ElasticBounds) -> "Supernet":
        return cls(bounds, weights=tc.load_checkpoint(path))


def forward(weights: Supernet, arch: Architecture, batch) -> Tensor:
    return weights.forward(arch, batch)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def cosine_lr(step: int, total: int, lr: float, min_lr: float) -> float:
    if total <= 1:
        return lr
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * step / (total - 1)))


def make_optimizer(params, cfg: TrainConfig) -> tc.AdamW:
    return tc.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def sandwich_archs(space: SearchSpace, rng: np.random.Generator) -> list[Architecture]:
    return [extreme_architecture(space, True), extreme_architecture(space, False),
            sample_uniform(space, rng), sample_uniform(space, rng)]


def sandwich_step(net: Supernet, space: SearchSpace, opt: tc.AdamW, images: np.ndarray,
                  labels: np.ndarray, rng: np.random.Generator, lr: float | None = None,
                  archs: list[Architecture] | None = None) -> list[float]:
    """Largest, smallest and two random subnets on one batch; one fused update."""
    archs = sandwich_archs(space, rng) if archs is None else archs
    opt.zero_grad()
    losses = []
    for arch in archs:
        loss = tc.cross_entropy(net.forward(arch, images), labels)
        loss.backward()
        losses.append(loss.item())
    opt.step(lr)
    return losses


def _batch_stream(ds: Dataset, batch_size: int, rng: np.random.Generator):
    while True:
        yield from ds.batches(batch_size, rng, drop_last=len(ds) >= batch_size)


def train_supernet(net: Supernet, space: SearchSpace, train: Dataset, cfg: TrainConfig, seed: int,
                   log=None) -> list[list[float]]:
    data_rng, arch_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    opt = make_optimizer(net.parameters(), cfg)
    stream = _batch_stream(train, cfg.batch_size, data_rng)
    history = []
    for step in range(cfg.steps):
        x, y = next(stream)
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.min_lr)
        history.append(sandwich_step(net, space, opt, x, y, arch_rng, lr))
        if log is not None and (step + 1) % max(1, cfg.steps // 10) == 0:
            log(f"step {step + 1}/{cfg.steps} losses " + " ".join(f"{v:.3f}" for v in history[-1]))
    return history


def predict(model, images: np.ndarray, arch: Architecture | None = None, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties resolve to the lowest class index."""
    preds = []
    with tc.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            logits = model.forward(arch, chunk) if arch is not None else model.forward(chunk)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, arch: Architecture | None, val: Dataset, batch_size: int = 256) -> float:
    """Top-1 error rate of ``arch`` (``None`` for a standalone :class:`Network`)."""
    preds = predict(model, val.images, arch, batch_size)
    return float(np.count_nonzero(preds != val.labels)) / len(val)


def train_network(net: Network, train: Dataset, cfg: TrainConfig, epochs: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    opt = make_optimizer(net.parameters(), cfg)
    per_epoch = max(1, len(train) // cfg.batch_size)
    total = epochs * per_epoch
    step = 0
    for _ in range(epochs):
        for x, y in train.batches(cfg.batch_size, rng, drop_last=len(train) >= cfg.batch_size):
            opt.zero_grad()
            tc.cross_entropy(net.forward(x), y).backward()
            opt.step(cosine_lr(step, total, cfg.lr, cfg.min_lr))
            step += 1


def retrain_standalone(arch: Architecture, shape: ModelShape, train: Dataset, val: Dataset,
                       epochs: int, seed: int, cfg: TrainConfig = TrainConfig()) -> tuple[Network, float]:
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    net = Network.initialize(arch, shape, int(init_ss.generate_state(1)[0]))
    train_network(net, train, cfg, epochs, int(data_ss.generate_state(1)[0]))
    return net, evaluate(net, None, val)


# ---------------------------------------------------------------------------
# attention statistics
# ---------------------------------------------------------------------------

def topk_distances(attn: np.ndarray, window: int, k: int) -> np.ndarray:
    """Mean grid distance from each query to its ``k`` most-attended other keys.

    ``attn`` has trailing dims (u, u); returns an array of the leading dims + (u,).
    The query itself is never counted; ties go to the lower key index.
    """
    u = window * window
    k = min(k, u - 1)
    lead = attn.shape[:-2]
    if k <= 0:
        return np.zeros(lead + (u,))
    a = attn.reshape(-1, u, u).astype(np.float64).copy()
    a[:, np.arange(u), np.arange(u)] = -np.inf
    order = np.argsort(-a, axis=-1, kind="stable")[..., :k]
    dist = grid_distances(window)
    picked = dist[np.arange(u)[None, :, None], order]
    return picked.mean(axis=-1).reshape(lead + (u,))


def attention_stats(model, arch: Architecture | None, images: np.ndarray, k: int) -> list[dict]:
    if k < 1:
        raise ValueError("k must be >= 1")
    record: list = []
    with tc.no_grad():
        if arch is None:
            model.forward(images, record=record)
        else:
            model.forward(arch, images, record=record)
    rows = []
    for (stage, block), window, attn in record:
        d = topk_distances(attn, window, k).reshape(-1)
        rows.append({"stage": stage, "block": block, "window": window, "k": min(k, window * window - 1),
                     "mean": float(d.mean()), "median": float(np.median(d)), "max": float(d.max())})
    return rows


def mean_grid_distance(window: int) -> float:
    """Average Euclidean distance between two distinct tokens of a w x w window.

    Counts offsets per axis instead of enumerating pairs: offset d occurs
    2(w - d) times along an axis for d > 0 and w times for d = 0.
    """
    if window < 2:
        return 0.0
    count = lambda d: window if d == 0 else 2 * (window - d)  # noqa: E731
    total = sum(count(dx) * count(dy) * math.hypot(dx, dy)
                for dx in range(window) for dy in range(window))
    u = window * window
    return total / (u * (u - 1))
