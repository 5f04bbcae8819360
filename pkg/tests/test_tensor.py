import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgs.tensor import (
    BadMagicError,
    DecodeError,
    IndexOrderError,
    IndexOutOfBoundsError,
    InvariantError,
    LayerPartition,
    NonFiniteValueError,
    NumericOverflowError,
    ParamVector,
    PartitionMismatchError,
    SparseUpdate,
    TrailingBytesError,
    TruncatedBufferError,
    apply_sparse,
    decode,
    diff_as_sparse,
    encode,
    encoded_size,
)


def random_update(rng, n=500, worker=None, t=None):
    nnz = int(rng.integers(0, n + 1))
    idx = np.sort(rng.choice(n, size=nnz, replace=False))
    vals = rng.standard_normal(nnz) * 10.0 ** rng.integers(-300, 300, size=nnz)
    vals[vals == 0] = 1.0
    return SparseUpdate(idx, vals,
                        int(rng.integers(0, 2**32)) if t is None else t,
                        int(rng.integers(0, 2**32)) if worker is None else worker)


def test_partition_offsets():
    p = LayerPartition((3, 1, 4))
    assert p.offsets == (0, 3, 4)
    assert p.total == 8
    assert [(s.start, s.stop) for s in p.slices()] == [(0, 3), (3, 4), (4, 8)]
    with pytest.raises(InvariantError):
        LayerPartition((2, 0))


def test_paramvector_is_read_only_and_finite():
    v = ParamVector([1.0, 2.0])
    with pytest.raises(ValueError):
        v.values[0] = 5.0
    with pytest.raises(NumericOverflowError):
        ParamVector([1.0, np.nan])
    with pytest.raises(InvariantError):
        ParamVector([1.0, 2.0], LayerPartition((3,)))


def test_sparse_update_invariants():
    with pytest.raises(InvariantError):
        SparseUpdate([2, 1], [1.0, 1.0])
    with pytest.raises(InvariantError):
        SparseUpdate([1, 1], [1.0, 1.0])
    with pytest.raises(InvariantError):
        SparseUpdate([0], [0.0])
    with pytest.raises(InvariantError):
        SparseUpdate([0], [np.inf])


def test_encode_empty_is_header_only():
    data = encode(SparseUpdate(worker_id=7, timestamp=9))
    assert len(data) == 16
    assert data == b"DGS1" + struct.pack("<III", 7, 9, 0)


def test_encode_single_entry_hand_assembled():
    u = SparseUpdate([3], [0.5], timestamp=1, worker_id=2)
    expected = b"DGS1" + struct.pack("<III", 2, 1, 1) + struct.pack("<I", 3) + struct.pack("<d", 0.5)
    assert encode(u) == expected
    assert len(expected) == encoded_size(1) == 28


def test_encode_deterministic():
    rng = np.random.default_rng(1)
    u = random_update(rng)
    assert encode(u) == encode(u)


def test_roundtrip_1000_random_updates():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        u = random_update(rng, n=int(rng.integers(1, 300)))
        data = encode(u)
        assert len(data) == 16 + 12 * u.nnz
        assert decode(data) == u


def test_decode_empty():
    assert decode(encode(SparseUpdate())) == SparseUpdate()


def test_decode_errors_are_distinct():
    good = encode(SparseUpdate([1, 4], [1.0, -2.0], 3, 1))
    with pytest.raises(TruncatedBufferError):
        decode(good[:10])
    with pytest.raises(TruncatedBufferError):
        decode(good[:-1])
    with pytest.raises(TrailingBytesError):
        decode(good + b"\0")
    with pytest.raises(BadMagicError):
        decode(b"XXXX" + good[4:])
    with pytest.raises(IndexOutOfBoundsError):
        decode(good, size=4)

    swapped = bytearray(good)
    swapped[16:28], swapped[28:40] = good[28:40], good[16:28]
    with pytest.raises(IndexOrderError):
        decode(bytes(swapped))

    nan = bytearray(good)
    nan[20:28] = struct.pack("<d", float("nan"))
    with pytest.raises(NonFiniteValueError):
        decode(bytes(nan))


def test_corrupted_length_field_raises_decode_error():
    good = bytearray(encode(SparseUpdate([1, 4], [1.0, -2.0])))
    for nnz in (0, 1, 3, 2**32 - 1):
        bad = bytearray(good)
        bad[12:16] = struct.pack("<I", nnz)
        with pytest.raises(DecodeError):
            decode(bytes(bad))


def test_apply_sparse_examples():
    dest = ParamVector([1.0, 2.0])
    assert apply_sparse(dest, SparseUpdate(), 1.0) == dest
    assert apply_sparse(dest, SparseUpdate([0], [0.5]), -1.0) == ParamVector([0.5, 2.0])
    delta = SparseUpdate([1], [0.25])
    assert apply_sparse(apply_sparse(dest, delta, 1.0), delta, -1.0) == dest


def test_apply_sparse_overflow_and_bounds():
    with pytest.raises(NumericOverflowError):
        apply_sparse(ParamVector([1e308]), SparseUpdate([0], [1e308]), 1.0)
    with pytest.raises(IndexOutOfBoundsError):
        apply_sparse(ParamVector([1.0]), SparseUpdate([1], [1.0]))


@given(st.integers(0, 2**31), st.floats(-8, 8, allow_nan=False).filter(lambda s: abs(s) > 1e-3))
@settings(max_examples=100, deadline=None)
def test_apply_sparse_linear(seed, s):
    rng = np.random.default_rng(seed)
    dest = ParamVector(np.zeros(50))
    delta = random_update(rng, n=50)
    delta = SparseUpdate(delta.indices, rng.standard_normal(delta.nnz) + 3.0)
    twice = apply_sparse(apply_sparse(dest, delta, s), delta, s).values
    once = apply_sparse(dest, delta, 2 * s).values
    np.testing.assert_allclose(twice, once, rtol=1e-15, atol=0)


def test_diff_as_sparse_examples():
    a = ParamVector([1.0, 0.0])
    assert diff_as_sparse(a, a) == SparseUpdate()
    assert diff_as_sparse(a, ParamVector([0.0, 0.0])) == SparseUpdate([0], [1.0])
    with pytest.raises(PartitionMismatchError):
        diff_as_sparse(ParamVector([1.0, 0.0], LayerPartition((1, 1))), ParamVector([0.0, 0.0]))


@given(st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_diff_densify_and_reconstruct(seed):
    rng = np.random.default_rng(seed)
    part = LayerPartition((7, 3, 10))
    a_vals = rng.standard_normal(20)
    b_vals = a_vals.copy()
    changed = rng.random(20) < 0.5
    b_vals[changed] = rng.standard_normal(changed.sum())
    a, b = ParamVector(a_vals, part), ParamVector(b_vals, part)
    d = diff_as_sparse(a, b)
    np.testing.assert_array_equal(d.densify(part).values, a_vals - b_vals)
    # b + fl(a - b) is within one rounding of a
    scale = np.maximum(np.abs(a_vals), np.abs(b_vals))
    assert np.all(np.abs(apply_sparse(b, d, 1.0).values - a_vals) <= scale * 2**-52)


@given(st.lists(st.integers(-2**20, 2**20), min_size=1, max_size=30), st.data())
@settings(max_examples=100, deadline=None)
def test_diff_then_apply_is_exact_on_dyadic_values(ints, data):
    a_vals = np.array(ints, dtype=float) / 1024
    b_vals = np.array(data.draw(st.lists(st.integers(-2**20, 2**20), min_size=len(ints), max_size=len(ints))), float) / 256
    a, b = ParamVector(a_vals), ParamVector(b_vals)
    assert apply_sparse(b, diff_as_sparse(a, b), 1.0) == a
