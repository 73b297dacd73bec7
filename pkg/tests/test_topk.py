import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from hetloco.errors import DimensionError, WireFormatError
from hetloco.linalg import RngStream
from hetloco.topk import (
    ChunkSpec,
    ErrorAccumulator,
    decode_sparse,
    densify,
    ef_accumulate,
    ef_subtract,
    encode_sparse,
    sparse_nbytes,
    topk_chunks,
)


def _oracle(flat, spec):
    keep = []
    for start in range(0, flat.size, spec.chunk_len):
        chunk = flat[start : start + spec.chunk_len]
        ranked = sorted(range(chunk.size), key=lambda i: (-abs(chunk[i]), i))
        keep.extend(start + i for i in sorted(ranked[: min(spec.k_per_chunk, chunk.size)]))
    return keep


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32), st.booleans())
def test_selection_matches_sort_oracle(n, chunk_len, k, seed, quantized):
    spec = ChunkSpec(chunk_len=chunk_len, k_per_chunk=min(k, chunk_len))
    x = RngStream(seed, 0).gaussian(n)
    if quantized:
        x = np.round(x * 2) / 2
    sd = topk_chunks(x, spec)
    assert sd.flat_positions().tolist() == _oracle(x, spec)
    assert sd.nnz == spec.kept(n)


def test_partial_chunk_keeps_min_k_len():
    spec = ChunkSpec(chunk_len=8, k_per_chunk=4)
    sd = topk_chunks(np.arange(1, 11, dtype=float), spec)
    assert [len(i) for i in sd.indices] == [4, 2]
    assert sd.flat_positions().tolist() == [4, 5, 6, 7, 8, 9]


def test_ties_go_to_lowest_index():
    spec = ChunkSpec(chunk_len=6, k_per_chunk=2)
    sd = topk_chunks(np.array([1.0, -3.0, 3.0, 0.5, -3.0, 2.0]), spec)
    assert sd.flat_positions().tolist() == [1, 2]
    flat = topk_chunks(np.full(6, 7.0), spec)
    assert flat.flat_positions().tolist() == [0, 1]


def test_density_constant():
    spec = ChunkSpec(chunk_len=4096, k_per_chunk=32)
    assert spec.density(4096 * 3) == pytest.approx(0.0078125)


@pytest.mark.parametrize("bad", [dict(chunk_len=4, k_per_chunk=5), dict(chunk_len=8, k_per_chunk=0), dict(chunk_len=70000, k_per_chunk=1)])
def test_chunk_spec_validation(bad):
    with pytest.raises(ValidationError):
        ChunkSpec(**bad)


def test_error_feedback_conserves_mass():
    spec = ChunkSpec(chunk_len=16, k_per_chunk=3)
    rng = RngStream(1, 0)
    acc = ErrorAccumulator.zeros_like(np.zeros((5, 7)))
    for _ in range(4):
        acc = ef_accumulate(acc, rng.gaussian((5, 7)))
        before = acc.e.copy()
        sd = topk_chunks(acc.e, spec)
        acc = ef_subtract(acc, sd)
        np.testing.assert_array_equal(densify(sd) + acc.e, before)
        assert np.all(acc.e.reshape(-1)[sd.flat_positions()] == 0)


def test_untransmitted_entries_keep_their_bits():
    spec = ChunkSpec(chunk_len=4, k_per_chunk=1)
    e = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    acc = ef_subtract(ErrorAccumulator(e), topk_chunks(e, spec))
    assert acc.e.tolist() == [0.1, 0.2, 0.3, 0.0, 0.0]


def test_error_stays_bounded_under_bounded_input():
    spec = ChunkSpec(chunk_len=32, k_per_chunk=4)
    rng = RngStream(2, 0)
    acc = ErrorAccumulator.zeros_like(np.zeros(256), beta=0.95)
    peak = 0.0
    for _ in range(200):
        acc = ef_accumulate(acc, rng.gaussian(256))
        acc = ef_subtract(acc, topk_chunks(acc.e, spec))
        peak = max(peak, float(np.abs(acc.e).max()))
    # geometric bound on the accumulated residual
    assert peak < 1.0 / (1 - 0.95) * 6


def test_accumulate_hand_values_and_decay():
    acc = ef_accumulate(ErrorAccumulator(np.array([1.0, 1.0]), beta=0.95), np.array([1.0, -1.0]))
    np.testing.assert_allclose(acc.e, [1.95, -0.05])
    norm = np.linalg.norm(acc.e)
    acc = ef_accumulate(acc, np.zeros(2))
    assert np.linalg.norm(acc.e) == pytest.approx(0.95 * norm)


def test_accumulate_checks_shapes():
    with pytest.raises(DimensionError):
        ef_accumulate(ErrorAccumulator.zeros_like(np.zeros(3)), np.zeros(4))


def test_wire_format_size_and_decode():
    spec = ChunkSpec(chunk_len=64, k_per_chunk=8)
    x = RngStream(3, 0).gaussian((10, 10)).astype(np.float32)
    sd = topk_chunks(x, spec)
    buf = encode_sparse(sd)
    assert len(buf) == sparse_nbytes(sd) == 16 + 2 * 4 + (8 + 8) * 6
    back = decode_sparse(buf, (10, 10))
    np.testing.assert_array_equal(densify(back), densify(sd))


def test_wire_format_rejects_damage():
    sd = topk_chunks(np.arange(20, dtype=np.float32), ChunkSpec(chunk_len=8, k_per_chunk=2))
    buf = encode_sparse(sd)
    with pytest.raises(WireFormatError):
        decode_sparse(buf[:-1])
    with pytest.raises(WireFormatError):
        decode_sparse(buf + b"\0")
    with pytest.raises(WireFormatError):
        decode_sparse(buf[:10])
    with pytest.raises(WireFormatError):
        decode_sparse(buf, (3, 3))
