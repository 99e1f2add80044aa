"""Flat float64 parameter vectors and the balanced chunk partition used by the ring collective.

Everything downstream (gradients, models, collective payloads) is a ParamVector.
Vectors are immutable once constructed; every operation allocates its output and
checks that the result is finite, so NaN/Inf never propagates silently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionMismatchError(ValueError):
    """Raised when two vectors of different dimension are combined."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf entries."""


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NonFiniteError(f"{context}: {bad} non-finite entries out of {arr.size}")


class ParamVector:
    """Immutable 1-D float64 vector of model parameters or gradients."""

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim != 1:
            raise ValueError(f"parameter vector must be 1-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("parameter vector must have positive dimension")
        _check_finite(arr, "ParamVector")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "ParamVector":
        # Trusted no-copy path for freshly allocated arrays we own.
        _check_finite(arr, "ParamVector")
        arr.flags.writeable = False
        obj = object.__new__(cls)
        obj._data = arr
        return obj

    @classmethod
    def zeros(cls, dim: int) -> "ParamVector":
        if dim < 1:
            raise ValueError("dimension must be positive")
        return cls._wrap(np.zeros(dim, dtype=np.float64))

    @property
    def data(self) -> np.ndarray:
        """Read-only ndarray view of the entries."""
        return self._data

    @property
    def dim(self) -> int:
        return self._data.size

    def __len__(self) -> int:
        return self._data.size

    def __repr__(self) -> str:
        return f"ParamVector(dim={self.dim})"


def require_same_dim(u: ParamVector, v: ParamVector) -> None:
    if u.dim != v.dim:
        raise DimensionMismatchError(f"dimension mismatch: {u.dim} vs {v.dim}")


def blend(a: float, u: ParamVector, b: float, v: ParamVector) -> ParamVector:
    """Return the affine combination a*u + b*v as a new vector.

    This is the shared kernel for all model updates (SGD steps, elastic pulls,
    center averaging). Exact for a, b in {0, 1} on finite inputs.
    """
    require_same_dim(u, v)
    out = a * u.data + b * v.data
    _check_finite(out, "blend")
    return ParamVector._wrap(out)


@dataclass(frozen=True)
class ChunkSpec:
    """Balanced partition of index range [0, d) into num_chunks contiguous ranges.

    Sizes differ by at most one; the remainder goes to the lowest-index chunks.
    When num_chunks > d some trailing chunks are empty, but the ranges still
    tile [0, d) exactly.
    """

    num_chunks: int
    bounds: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.num_chunks != len(self.bounds):
            raise ValueError("bounds must have one range per chunk")
        cursor = 0
        for start, end in self.bounds:
            if start != cursor or end < start:
                raise ValueError(f"chunk ranges must be contiguous and ordered, got {self.bounds}")
            cursor = end

    @property
    def dim(self) -> int:
        return self.bounds[-1][1] if self.bounds else 0

    def size(self, index: int) -> int:
        start, end = self.bounds[index]
        return end - start

    def slice(self, index: int) -> slice:
        start, end = self.bounds[index]
        return slice(start, end)

    @property
    def max_size(self) -> int:
        return max(end - start for start, end in self.bounds)


def partition_chunks(d: int, num_chunks: int) -> ChunkSpec:
    """Split [0, d) into num_chunks balanced contiguous ranges.

    The first d mod num_chunks chunks get one extra element. For d < num_chunks
    the trailing chunks are empty ranges at offset d.
    """
    if d < 1:
        raise ValueError("d must be positive")
    if num_chunks < 1:
        raise ValueError("num_chunks must be positive")
    base, rem = divmod(d, num_chunks)
    bounds = []
    cursor = 0
    for i in range(num_chunks):
        size = base + (1 if i < rem else 0)
        bounds.append((cursor, cursor + size))
        cursor += size
    return ChunkSpec(num_chunks=num_chunks, bounds=tuple(bounds))


def mean_of_vectors(vectors: list[ParamVector]) -> ParamVector:
    """Mean in fixed ascending-index order, so results are reproducible bit for bit."""
    if not vectors:
        raise ValueError("need at least one vector")
    acc = vectors[0].data.copy()
    for v in vectors[1:]:
        require_same_dim(vectors[0], v)
        acc += v.data
    return ParamVector._wrap(acc / len(vectors))
