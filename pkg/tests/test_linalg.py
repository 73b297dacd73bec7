import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetloco.errors import DegenerateBasisError, DimensionError, NonFiniteError, WireFormatError
from hetloco.linalg import (
    RngStream,
    as_tensor,
    matmul,
    orthonormality_error,
    qr_orthonormalize,
    tensor_from_bytes,
    tensor_to_bytes,
)


def test_rng_stream_is_keyed_by_seed_and_stream():
    a = RngStream(7, 1).gaussian(5)
    b = RngStream(7, 1).gaussian(5)
    c = RngStream(7, 2).gaussian(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_gaussian_stream_is_standard_normal():
    x = RngStream(11, 3).gaussian(100_000)
    assert x.dtype == np.float64
    # standard error of the mean is ~0.003
    assert abs(x.mean()) < 0.015
    assert abs(x.std() - 1.0) < 0.01


def test_qr_has_nonnegative_diagonal():
    a = RngStream(1, 0).gaussian((12, 5))
    q = qr_orthonormalize(a)
    r = q.T @ a
    assert np.all(np.diag(r) >= 0)
    assert orthonormality_error(q) < 1e-10


def test_qr_rejects_rank_deficient_input():
    a = RngStream(2, 0).gaussian((8, 3))
    a[:, 2] = a[:, 0]
    with pytest.raises(DegenerateBasisError):
        qr_orthonormalize(a)


def test_qr_rejects_wide_matrix():
    with pytest.raises(DimensionError):
        qr_orthonormalize(np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32))
def test_qr_columns_are_orthonormal(d, k, seed):
    k = min(k, d)
    q = qr_orthonormalize(RngStream(seed, 5).gaussian((d, k)))
    assert q.shape == (d, k)
    assert orthonormality_error(q) < 1e-10


def test_as_tensor_rejects_nan():
    with pytest.raises(NonFiniteError):
        as_tensor([1.0, float("nan")])


def test_matmul_checks_inner_extent():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3, 4)), np.ones((3, 4)))
    assert matmul(np.ones((2, 3, 4)), np.ones((4, 5))).shape == (2, 3, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32))
def test_matmul_matches_loop_oracle(batch, n, m, p, seed):
    rng = RngStream(seed, 7)
    a, b = rng.gaussian((batch, n, m)), rng.gaussian((m, p))
    expected = np.zeros((batch, n, p))
    for i in range(batch):
        for r in range(n):
            for c in range(p):
                expected[i, r, c] = sum(a[i, r, j] * b[j, c] for j in range(m))
    np.testing.assert_allclose(matmul(a, b), expected, rtol=1e-12, atol=1e-12)


def test_matmul_is_associative_and_layout_independent():
    rng = RngStream(12, 0)
    a, b, c = rng.gaussian((3, 5, 6)), rng.gaussian((6, 4)), rng.gaussian((4, 2))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-12, atol=1e-12)
    bt = rng.gaussian((4, 6)).T
    assert np.array_equal(matmul(a, bt), matmul(a, np.ascontiguousarray(bt)))
    with pytest.raises(DimensionError):
        matmul(a, np.ones(6))


def test_tensor_blob_preserves_values_and_precision():
    x = RngStream(3, 0).gaussian((3, 4)).astype(np.float32)
    blob = tensor_to_bytes(x) + tensor_to_bytes(x.astype(np.float64))
    first, offset = tensor_from_bytes(blob)
    second, end = tensor_from_bytes(blob, offset)
    assert first.dtype == np.float32 and np.array_equal(first, x)
    assert second.dtype == np.float64
    assert end == len(blob)


def test_truncated_tensor_blob_is_rejected():
    blob = tensor_to_bytes(np.ones((4, 4)))
    with pytest.raises(WireFormatError):
        tensor_from_bytes(blob[:-8])


@pytest.mark.parametrize("cut", [0, 4, 12, 20])
def test_short_tensor_header_is_a_wire_error(cut):
    blob = tensor_to_bytes(np.ones((4, 4)))
    with pytest.raises(WireFormatError):
        tensor_from_bytes(blob[:cut])


def test_tensor_blob_with_absurd_rank_is_a_wire_error():
    with pytest.raises(WireFormatError):
        tensor_from_bytes((2**40).to_bytes(8, "little") + bytes(64))
