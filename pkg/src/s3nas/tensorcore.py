"""Small dense-tensor engine with reverse-mode autodiff.

Arrays are numpy ``float32`` by default; every primitive records a backward
closure on the output tensor and :meth:`Tensor.backward` walks the graph once
in reverse topological order. Broadcasting is limited to a trailing-dimension
operand (bias add, layernorm affine, attention bias).
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

# tanh-approximated gelu constants
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

# grad mode and the MAC counter are per-thread so evaluators may run concurrently
_local = threading.local()


def _grad_on() -> bool:
    return getattr(_local, "grad", True)


def _counter() -> list[int] | None:
    return getattr(_local, "macs", None)


class ShapeMismatch(ValueError):
    def __init__(self, op: str, a: Sequence[int], b: Sequence[int]):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class GraphConsumed(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    prev = _grad_on()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by :func:`matmul` inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    prev = _counter()
    _local.macs = [0]
    try:
        yield _local.macs
    finally:
        _local.macs = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        # float64 ndarrays pass through untouched (gradient checks run in f64)
        if dtype is None:
            keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if keep else DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeMismatch("backward", self.shape, ())
        if self._consumed:
            raise GraphConsumed("backward already ran on this graph; rebuild it first")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node._accumulate(g)
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
            node._consumed = True
            node._backward = None
            node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    needs = _grad_on() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_trailing(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeMismatch(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing("add", a, b)

    def backward(g):
        return g, _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def backward_scalar(g):
            return (g * s,)

        return _make(a.data * a.data.dtype.type(s), (a,), backward_scalar)
    _check_trailing("mul", a, b)

    def backward(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` is either 2-D or has ``a``'s leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data
    counter = _counter()
    if counter is not None:
        counter[0] += int(np.prod(out.shape, dtype=np.int64)) * a.shape[-1]

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatch("reshape", a.shape, tuple(shape)) from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (slice-only) indexing; gradient scatters into zeros."""
    if not isinstance(index, tuple):
        index = (index,)
    if len(index) > a.ndim or not all(isinstance(i, slice) for i in index):
        raise ShapeMismatch("slice", a.shape, tuple(str(i) for i in index))
    out = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), backward)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``a`` along axis 0 (used for relative-position lookup)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise ShapeMismatch("take", a.shape, indices.shape)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (full,)

    return _make(a.data[indices], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeMismatch("concat", ref.shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def sum_(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(()), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size

        def backward_all(g):
            return (np.full(a.shape, g.reshape(()) / n, dtype=a.data.dtype),)

        return _make(np.asarray(a.data.mean(), dtype=a.data.dtype).reshape(()), (a,), backward_all)
    ax = axis % a.ndim
    n = a.shape[ax]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, a.shape).copy(),)

    return _make(a.data.mean(axis=ax), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeMismatch("layernorm", x.shape, gamma.shape if gamma.shape != (h,) else beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, h)
        return gx, (lead * xhat.reshape(-1, h)).sum(axis=0), lead.sum(axis=0)

    return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    d = x.data
    inner = _GELU_C * (d + _GELU_A * (d * d * d))
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(out.astype(d.dtype, copy=False), (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows; the reduction runs in float64."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch("cross_entropy", logits.shape, labels.shape)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float((logsum - z[rows, labels]).mean())

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g.reshape(())) / len(labels))).astype(logits.data.dtype),)

    return _make(np.asarray(loss, dtype=logits.data.dtype).reshape(()), (logits,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return add(y, bias) if bias is not None else y


class AdamW:
    """AdamW with decoupled weight decay.

    Decay is applied to the parameter first, then the bias-corrected Adam step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[int, dict] = {}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            st = self.state.setdefault(i, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
            p.data, st["m"], st["v"] = adamw_step(
                p.data, g, st["m"], st["v"], self.t, lr, self.betas, self.eps, self.weight_decay
            )


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
    """One AdamW update; returns new (param, m, v). ``t`` is the 1-based step."""
    b1, b2 = betas
    param = param * param.dtype.type(1.0 - lr * weight_decay)
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    param = param - (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)
    return param, m.astype(param.dtype), v.astype(param.dtype)


# ---------------------------------------------------------------------------
# checkpoint file
#
#   magic   4 bytes  b"S3CK"
#   version u32      1
#   count   u32      number of tensors
#   table   count x { name_len u16, name utf-8, ndim u32, dims u32 * ndim }
#   payload f32 little-endian, tensors concatenated in table order, row-major
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"S3CK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError("version")
    off = 12
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        table.append((name, dims))
    out = {}
    for name, dims in table:
        n = int(np.prod(dims, dtype=np.int64))
        if off + 4 * n > len(buf):
            raise CheckpointError("payload length")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(DTYPE)
        off += 4 * n
    if off != len(buf):
        raise CheckpointError("payload length")
    return out
