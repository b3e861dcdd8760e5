"""Synthetic interleaved-spiral classification data and its binary file format.

File layout (little-endian)::

    b"ACDS" | u32 count | u32 dim | u32 num_classes | f32[count*dim] | u8[count]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .nncore import DTYPE, make_rng

MAGIC = b"ACDS"
_HEADER = struct.Struct("<4sIII")


@dataclass
class Dataset:
    x: np.ndarray  # (N, dim) float32
    y: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=DTYPE)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise InputError(f"features {self.x.shape} and labels {self.y.shape} disagree")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, len(self), self.dim, self.num_classes)
        return head + self.x.astype("<f4").tobytes() + self.y.astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> Dataset:
        if len(blob) < _HEADER.size:
            raise InputError("dataset file truncated")
        magic, n, dim, k = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise InputError("not a dataset file")
        off = _HEADER.size
        need = off + 4 * n * dim + n
        if len(blob) != need:
            raise InputError(f"dataset file has {len(blob)} bytes, expected {need}")
        x = np.frombuffer(blob, "<f4", n * dim, off).reshape(n, dim)
        y = np.frombuffer(blob, np.uint8, n, off + 4 * n * dim)
        return cls(x.astype(DTYPE), y.astype(np.int64), k)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Dataset:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class SpiralSpec:
    num_classes: int = 3
    train: int = 6000
    val: int = 1000
    test: int = 1000
    turns: float = 1.5
    jitter: float = 0.04
    label_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > 255:
            raise ConfigError("num_classes must lie in [2, 255]")
        if min(self.train, self.val, self.test) < 1:
            raise ConfigError("split sizes must be positive")
        if not 0 <= self.label_noise < 1 or self.jitter < 0 or self.turns <= 0:
            raise ConfigError("bad spiral noise or turn settings")


def class_counts(n: int, k: int) -> list[int]:
    """Per-class sizes: as equal as possible, extras to the lowest classes."""
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def spirals(n: int, spec: SpiralSpec, stream: str) -> Dataset:
    """``n`` points on ``spec.num_classes`` interleaved arms in [-1, 1]^2.

    A fraction ``label_noise`` of each class is relabelled to the next
    class (cyclically), which keeps the class histogram unchanged.
    """
    k = spec.num_classes
    rng = make_rng(spec.seed, "spirals", stream)
    xs, ys = [], []
    for c, m in enumerate(class_counts(n, k)):
        t = np.sqrt(rng.random(m))
        angle = 2 * np.pi * (spec.turns * t + c / k)
        pts = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
        pts += spec.jitter * rng.standard_normal(pts.shape)
        labels = np.full(m, c, dtype=np.int64)
        flip = int(round(spec.label_noise * (n // k)))
        if flip:
            labels[rng.choice(m, size=flip, replace=False)] = (c + 1) % k
        xs.append(pts)
        ys.append(labels)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(n)
    return Dataset(x[order].astype(DTYPE), y[order], k)


def make_splits(spec: SpiralSpec = SpiralSpec()) -> dict[str, Dataset]:
    return {
        "train": spirals(spec.train, spec, "train"),
        "val": spirals(spec.val, spec, "val"),
        "test": spirals(spec.test, spec, "test"),
    }
