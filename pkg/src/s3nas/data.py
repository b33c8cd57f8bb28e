"""Synthetic oriented-stripe classification data and the flat binary format.

Flat file layout (little-endian)::

    magic   4 bytes   b"S3DS"
    version u32       1
    N, C, S, K u32    sample count, channels, side, classes
    split   u8        0 = train, 1 = val
    pixels  f32       N*C*S*S, row-major
    labels  u32       N
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"S3DS"
VERSION = 1
SPLITS = ("train", "val")
_HEADER = struct.Struct("<4sIIIIIB")


class InvalidConfig(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, field: str, detail: str = ""):
        super().__init__(f"{field}: {detail}" if detail else field)
        self.field = field


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, C, S, S) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[2] != self.images.shape[3]:
            raise InvalidConfig(f"images must be N x C x S x S, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise InvalidConfig("labels and images disagree on N")
        if self.split not in SPLITS:
            raise InvalidConfig(f"unknown split {self.split!r}")
        if self.classes <= 0 or min(self.images.shape) <= 0:
            raise InvalidConfig("sizes must be positive")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.images[idx], self.labels[idx]


def class_template(k: int, classes: int, side: int, contrast: float = 0.02) -> np.ndarray:
    """Noise-free stripe image for class ``k``: orientation, frequency and phase all vary with k."""
    theta = math.pi * k / classes
    freq = 2.0 + (k % 3)
    phase = math.pi * k / classes
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    proj = xx * math.cos(theta) + yy * math.sin(theta)
    return 0.5 + contrast * np.cos(2.0 * math.pi * freq * proj + phase)


def _render(rng: np.random.Generator, n: int, classes: int, side: int, channels: int,
            noise: float, contrast: float) -> tuple[np.ndarray, np.ndarray]:
    # round-robin labels guarantee every class appears once n >= classes
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    templates = np.stack([class_template(k, classes, side, contrast) for k in range(classes)])
    imgs = templates[labels][:, None, :, :].repeat(channels, axis=1)
    if noise > 0:
        imgs = imgs + rng.normal(0.0, noise, size=imgs.shape)
    return np.clip(imgs, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)


def generate_synthetic(seed: int, n_train: int = 2048, n_val: int = 512, side: int = 32,
                       classes: int = 4, channels: int = 1, noise: float = 0.1,
                       contrast: float = 0.02) -> tuple[Dataset, Dataset]:
    if classes < 2:
        raise InvalidConfig("classes must be >= 2")
    if side < 8:
        raise InvalidConfig("side must be >= 8")
    if min(n_train, n_val, channels) <= 0:
        raise InvalidConfig("sizes must be positive")
    if n_train < classes or n_val < classes:
        raise InvalidConfig("each split needs at least one sample per class")
    if noise < 0:
        raise InvalidConfig("noise must be >= 0")
    train_ss, val_ss = np.random.SeedSequence(seed).spawn(2)
    xtr, ytr = _render(np.random.default_rng(train_ss), n_train, classes, side, channels, noise, contrast)
    xva, yva = _render(np.random.default_rng(val_ss), n_val, classes, side, channels, noise, contrast)
    return Dataset(xtr, ytr, classes, "train"), Dataset(xva, yva, classes, "val")


def standardize(train: Dataset, val: Dataset) -> tuple[Dataset, Dataset]:
    """Shift and scale both splits by the training split's pixel mean and std."""
    mu = float(train.images.mean(dtype=np.float64))
    sd = float(train.images.std(dtype=np.float64)) or 1.0
    scale = lambda ds: Dataset(((ds.images - mu) / sd).astype(np.float32), ds.labels, ds.classes, ds.split)  # noqa: E731
    return scale(train), scale(val)


def save_flat(ds: Dataset, path: str | Path) -> None:
    n, c, s, _ = ds.images.shape
    header = _HEADER.pack(MAGIC, VERSION, n, c, s, ds.classes, SPLITS.index(ds.split))
    Path(path).write_bytes(header + ds.images.astype("<f4").tobytes()
                           + ds.labels.astype("<u4").tobytes())


def load_flat(path: str | Path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("header", "file shorter than header")
    magic, version, n, c, s, k, split = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("magic", repr(magic))
    if version != VERSION:
        raise FormatError("version", str(version))
    for name, v in (("N", n), ("channels", c), ("side", s), ("classes", k)):
        if v == 0:
            raise FormatError(name, "must be positive")
    if split >= len(SPLITS):
        raise FormatError("split", str(split))
    npix = n * c * s * s
    expected = _HEADER.size + 4 * npix + 4 * n
    if len(buf) != expected:
        raise FormatError("payload length", f"expected {expected} bytes, got {len(buf)}")
    images = np.frombuffer(buf, dtype="<f4", count=npix, offset=_HEADER.size)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=_HEADER.size + 4 * npix)
    if labels.size and labels.max() >= k:
        raise FormatError("labels", f"label {int(labels.max())} >= classes {k}")
    return Dataset(images.reshape(n, c, s, s).astype(np.float32), labels.astype(np.int64), k,
                   SPLITS[split])
