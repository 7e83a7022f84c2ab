"""Dense NCHW tensors, precision handling, and deterministic weight streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
PRECISIONS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}") from None


class Tensor:
    """Immutable 4-D (batch, channel, height, width) array of finite reals.

    This is the boundary type for model inputs/outputs. Entries are validated
    to be finite at construction; internal kernels work on plain ndarrays and
    do not re-validate.
    """

    __slots__ = ("data",)

    def __init__(self, data, precision: str | None = None):
        arr = np.asarray(data)
        if precision is not None:
            arr = arr.astype(dtype_of(precision), copy=False)
        elif arr.dtype not in PRECISIONS:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor must be 4-D (N, C, H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor entries must be finite (found NaN or Inf)")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return PRECISIONS[self.data.dtype]

    @classmethod
    def zeros(cls, shape, precision: str = "f32") -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype_of(precision)))

    @classmethod
    def full(cls, shape, value: float, precision: str = "f32") -> "Tensor":
        return cls(np.full(shape, value, dtype=dtype_of(precision)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision})"


def as_nchw(x) -> np.ndarray:
    """Accept a Tensor or a 4-D ndarray, return the backing ndarray."""
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-D (N, C, H, W) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Rng:
    """Deterministic weight-stream source.

    Every named stream is an independent PCG64 generator seeded by
    SeedSequence([seed, crc32(name)]). PCG64's bit stream is fixed across
    platforms for a given seed, and keying streams by parameter name makes
    initialization order-independent: the same (seed, name) always yields
    the same scalars.
    """

    seed: int

    def stream(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, key])))

    def normal(self, name: str, shape, std: float = 1.0, precision: str = "f32") -> np.ndarray:
        # Sample in f64, then cast: the f32 stream is the rounded f64 stream,
        # keeping values comparable across precisions.
        vals = self.stream(name).standard_normal(size=shape, dtype=np.float64) * std
        return vals.astype(dtype_of(precision))

    def uniform(self, name: str, shape, low: float = 0.0, high: float = 1.0, precision: str = "f32") -> np.ndarray:
        vals = self.stream(name).uniform(low, high, size=shape)
        return vals.astype(dtype_of(precision))
