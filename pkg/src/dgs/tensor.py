"""Flat parameter vectors, coordinate-format sparse deltas and their wire encoding.

Wire layout (little-endian)::

    magic     4s   b"DGS1"
    worker_id u32
    timestamp u32
    nnz       u32
    nnz x (index u32, value f64)

so an encoded update always takes ``16 + 12 * nnz`` bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAGIC = b"DGS1"
HEADER_BYTES = 16
ENTRY_BYTES = 12

_HEADER = struct.Struct("<4sII")
_NNZ = struct.Struct("<I")
assert _HEADER.size + _NNZ.size == HEADER_BYTES
_ENTRY = np.dtype([("index", "<u4"), ("value", "<f8")])
assert _ENTRY.itemsize == ENTRY_BYTES


class InvariantError(ValueError):
    """A value violates the invariants of its type."""


class NumericOverflowError(ArithmeticError):
    """An operation produced a NaN or infinite component."""


class PartitionMismatchError(ValueError):
    pass


class DecodeError(ValueError):
    """Base class for malformed wire buffers."""


class TruncatedBufferError(DecodeError):
    pass


class TrailingBytesError(DecodeError):
    pass


class BadMagicError(DecodeError):
    pass


class IndexOutOfBoundsError(DecodeError):
    pass


class NonFiniteValueError(DecodeError):
    pass


class IndexOrderError(DecodeError):
    pass


@dataclass(frozen=True)
class LayerPartition:
    """Contiguous layer blocks of a flattened model."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise InvariantError(f"layer sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def single(cls, n: int) -> "LayerPartition":
        return cls((n,))

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.cumsum((0,) + self.sizes[:-1]))

    @property
    def total(self) -> int:
        return sum(self.sizes)

    @property
    def num_layers(self) -> int:
        return len(self.sizes)

    def slices(self) -> list[slice]:
        return [slice(o, o + s) for o, s in zip(self.offsets, self.sizes)]


class ParamVector:
    """Read-only float64 vector with a layer partition.

    The underlying array is never mutated; every operation returns a new
    vector.
    """

    __slots__ = ("_values", "partition")

    def __init__(self, values, partition: LayerPartition | None = None):
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if partition is None:
            partition = LayerPartition.single(arr.size)
        if partition.total != arr.size:
            raise InvariantError(
                f"partition covers {partition.total} elements, vector has {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericOverflowError("ParamVector values must be finite")
        arr.flags.writeable = False
        self._values = arr
        self.partition = partition

    @classmethod
    def zeros(cls, partition: LayerPartition) -> "ParamVector":
        return cls(np.zeros(partition.total), partition)

    @classmethod
    def _wrap(cls, arr: np.ndarray, partition: LayerPartition) -> "ParamVector":
        # Skips the copy; caller hands over ownership of ``arr``.
        if not np.all(np.isfinite(arr)):
            raise NumericOverflowError("operation produced a non-finite component")
        obj = cls.__new__(cls)
        arr.flags.writeable = False
        obj._values = arr
        obj.partition = partition
        return obj

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return self._values.size

    def layer(self, j: int) -> np.ndarray:
        return self._values[self.partition.slices()[j]]

    def with_values(self, arr) -> "ParamVector":
        arr = np.array(arr, dtype=np.float64, copy=True).reshape(-1)
        if arr.size != len(self):
            raise InvariantError("length is fixed at creation")
        return ParamVector._wrap(arr, self.partition)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        _check_same_partition(self, other)
        return ParamVector._wrap(self._values + other._values, self.partition)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        _check_same_partition(self, other)
        return ParamVector._wrap(self._values - other._values, self.partition)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector._wrap(self._values * float(scalar), self.partition)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.partition == other.partition and np.array_equal(
            self._values, other._values
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"ParamVector({self._values!r}, layers={self.partition.sizes})"


def _check_same_partition(a: ParamVector, b: ParamVector) -> None:
    if a.partition != b.partition:
        raise PartitionMismatchError(
            f"partition mismatch: {a.partition.sizes} vs {b.partition.sizes}"
        )


@dataclass(frozen=True, eq=False)
class SparseUpdate:
    """Coordinate-format delta over a flat vector.

    ``indices`` are positions in the full flattened vector, strictly
    increasing; ``values`` are nonzero and finite.
    """

    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float64))
    timestamp: int = 0
    worker_id: int = 0

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.size and not np.issubdtype(idx.dtype, np.integer):
            if not np.all(idx == np.floor(idx)):
                raise InvariantError("indices must be integral")
        idx = np.array(idx, dtype=np.int64).reshape(-1)
        val = np.array(self.values, dtype=np.float64).reshape(-1)
        if idx.size != val.size:
            raise InvariantError("indices and values differ in length")
        if idx.size:
            if idx[0] < 0 or idx[-1] > 0xFFFFFFFF:
                raise InvariantError("index outside the u32 range")
            if np.any(np.diff(idx) <= 0):
                raise InvariantError("indices must be strictly increasing")
            if not np.all(np.isfinite(val)):
                raise InvariantError("values must be finite")
            if np.any(val == 0.0):
                raise InvariantError("explicit zero entries are not allowed")
        if not 0 <= int(self.timestamp) < 2**32 or not 0 <= int(self.worker_id) < 2**32:
            raise InvariantError("timestamp/worker_id out of range")
        idx.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "worker_id", int(self.worker_id))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseUpdate):
            return NotImplemented
        # Bit-level comparison so that -0.0/+0.0 or NaN payloads cannot hide.
        return (
            self.timestamp == other.timestamp
            and self.worker_id == other.worker_id
            and np.array_equal(self.indices, other.indices)
            and self.values.view(np.uint64).tobytes() == other.values.view(np.uint64).tobytes()
        )

    __hash__ = None

    def densify(self, partition: LayerPartition) -> ParamVector:
        out = np.zeros(partition.total)
        if self.nnz and self.indices[-1] >= partition.total:
            raise InvariantError("update index beyond vector length")
        out[self.indices] = self.values
        return ParamVector._wrap(out, partition)

    def scaled(self, factor: float) -> "SparseUpdate":
        return from_dense_entries(self.indices, self.values * factor, self.timestamp, self.worker_id)

    def with_header(self, *, timestamp: int | None = None, worker_id: int | None = None) -> "SparseUpdate":
        return SparseUpdate(
            self.indices,
            self.values,
            self.timestamp if timestamp is None else timestamp,
            self.worker_id if worker_id is None else worker_id,
        )

    def __repr__(self) -> str:
        pairs = ", ".join(f"({i}, {v!r})" for i, v in zip(self.indices.tolist(), self.values.tolist()))
        return f"SparseUpdate({{{pairs}}}, t={self.timestamp}, k={self.worker_id})"


def from_dense_entries(indices, values, timestamp: int = 0, worker_id: int = 0) -> SparseUpdate:
    """Build an update from (index, value) arrays, dropping exact zeros."""
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    keep = values != 0.0
    return SparseUpdate(indices[keep], values[keep], timestamp, worker_id)


def sparse_from_dense(vec: ParamVector | np.ndarray, timestamp: int = 0, worker_id: int = 0) -> SparseUpdate:
    arr = vec.values if isinstance(vec, ParamVector) else np.asarray(vec, dtype=np.float64)
    idx = np.flatnonzero(arr)
    return SparseUpdate(idx, arr[idx], timestamp, worker_id)


def encoded_size(nnz: int) -> int:
    return HEADER_BYTES + ENTRY_BYTES * nnz


def dense_encoded_size(n: int) -> int:
    """Bytes a raw float64 transfer of ``n`` values would take with the same header."""
    return HEADER_BYTES + 8 * n


def encode(update: SparseUpdate) -> bytes:
    idx = update.indices
    if idx.size and np.any(np.diff(idx) <= 0):
        raise InvariantError("indices must be strictly increasing")
    records = np.empty(update.nnz, dtype=_ENTRY)
    records["index"] = idx
    records["value"] = update.values
    return (
        _HEADER.pack(MAGIC, update.worker_id, update.timestamp)
        + _NNZ.pack(update.nnz)
        + records.tobytes()
    )


def decode(data: bytes, size: int | None = None) -> SparseUpdate:
    """Parse a wire buffer. ``size`` (vector length) enables the bounds check."""
    data = bytes(data)
    if len(data) < HEADER_BYTES:
        raise TruncatedBufferError(f"need {HEADER_BYTES} header bytes, got {len(data)}")
    magic, worker_id, timestamp = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    (nnz,) = _NNZ.unpack_from(data, _HEADER.size)
    expected = encoded_size(nnz)
    if len(data) < expected:
        raise TruncatedBufferError(f"nnz={nnz} needs {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise TrailingBytesError(f"{len(data) - expected} trailing bytes after {nnz} entries")
    records = np.frombuffer(data, dtype=_ENTRY, count=nnz, offset=HEADER_BYTES)
    idx = records["index"].astype(np.int64)
    val = records["value"].astype(np.float64)
    if nnz:
        if np.any(np.diff(idx) <= 0):
            raise IndexOrderError("indices are not strictly increasing")
        if size is not None and idx[-1] >= size:
            raise IndexOutOfBoundsError(f"index {idx[-1]} >= vector length {size}")
        if not np.all(np.isfinite(val)):
            raise NonFiniteValueError("non-finite value in update")
        if np.any(val == 0.0):
            raise DecodeError("explicit zero value in update")
    return SparseUpdate(idx, val, timestamp, worker_id)


def apply_sparse(dest: ParamVector, delta: SparseUpdate, scale: float = 1.0) -> ParamVector:
    """Return ``dest`` with ``scale * value`` added at each delta index."""
    if delta.nnz and delta.indices[-1] >= len(dest):
        raise IndexOutOfBoundsError(f"index {delta.indices[-1]} >= vector length {len(dest)}")
    out = dest.values.copy()
    # overflow is reported by the finiteness check in _wrap
    with np.errstate(over="ignore", invalid="ignore"):
        if scale == 1.0:
            out[delta.indices] += delta.values
        elif scale == -1.0:
            out[delta.indices] -= delta.values
        else:
            out[delta.indices] += scale * delta.values
    return ParamVector._wrap(out, dest.partition)


def diff_as_sparse(a: ParamVector, b: ParamVector, timestamp: int = 0, worker_id: int = 0) -> SparseUpdate:
    """Sparse ``a - b`` holding exactly the nonzero differences."""
    _check_same_partition(a, b)
    return sparse_from_dense(a.values - b.values, timestamp, worker_id)


def concat_layers(layers: Sequence[np.ndarray]) -> ParamVector:
    parts = [np.asarray(x, dtype=np.float64).reshape(-1) for x in layers]
    return ParamVector(np.concatenate(parts), LayerPartition(tuple(p.size for p in parts)))
