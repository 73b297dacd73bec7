"""Dense linear algebra, seeded random streams and the tensor blob format.

Tensors are plain numpy arrays; this module owns the few places where the
repo needs more than numpy gives: validated construction from external input,
a Householder QR with a fixed sign convention, counter-based random streams
keyed by (seed, stream id), and a little-endian blob layout for checkpoints.
"""

from __future__ import annotations

import struct
from typing import Iterable, Literal

import numpy as np

from .errors import DegenerateBasisError, DimensionError, NonFiniteError, WireFormatError

Precision = Literal["float32", "float64"]

_PRECISION_TAGS = {"float32": 32, "float64": 64}
_TAG_DTYPES = {32: np.dtype("<f4"), 64: np.dtype("<f8")}
_MAX_RANK = 8

# Stream ids reserved per purpose; replicas offset from these.
MODEL_STREAM = 1
BASIS_STREAM = 2
DATA_STREAM = 1_000
SHARD_STREAM = 3


def dtype_for(precision: Precision) -> np.dtype:
    return np.dtype(np.float32 if precision == "float32" else np.float64)


def orthonormal_tolerance(dtype: np.dtype) -> float:
    return 1e-5 if np.dtype(dtype) == np.float32 else 1e-10


def as_tensor(data, precision: Precision = "float64") -> np.ndarray:
    """Build a tensor from external input, rejecting NaN/Inf."""
    arr = np.array(data, dtype=dtype_for(precision))
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf values")
    return arr


class RngStream:
    """Philox4x64 stream keyed by (seed, stream_id).

    Philox is counter-based, so a given key produces the same sequence on every
    platform and independently of how threads are scheduled. One owner per stream.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream_id < 2**64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def gaussian(self, shape: Iterable[int] | int) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def gaussian(rng: RngStream, shape) -> np.ndarray:
    """I.i.d. standard normal samples (float64)."""
    return rng.gaussian(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a[..., n] @ b[n, p]; leading axes of ``a`` are treated as a batch.

    Operands are made C-contiguous first so equal inputs always reach the same
    BLAS kernel; results then repeat bit for bit at a fixed BLAS thread count.
    The order of the n-term sums is whatever that kernel uses.
    """
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def qr_orthonormalize(a: np.ndarray) -> np.ndarray:
    """Orthonormal basis of Col(a) via Householder QR, with diag(R) >= 0."""
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    d, k = a.shape
    if not d >= k >= 1:
        raise DimensionError(f"need d >= k >= 1, got d={d}, k={k}")
    work = np.asarray(a, dtype=np.float64)
    # numpy's qr is LAPACK geqrf, i.e. Householder reflections.
    q, r = np.linalg.qr(work, mode="reduced")
    diag = np.diag(r)
    scale = np.linalg.norm(work)
    if scale == 0.0 or np.min(np.abs(diag)) < 1e-12 * scale:
        raise DegenerateBasisError(f"rank-deficient input for a {d}x{k} basis")
    signs = np.where(diag < 0, -1.0, 1.0)
    return (q * signs).astype(a.dtype if a.dtype.kind == "f" else np.float64)


def orthonormality_error(u: np.ndarray) -> float:
    """max |UᵀU − I|"""
    k = u.shape[1]
    return float(np.max(np.abs(u.T @ u - np.eye(k, dtype=u.dtype))))


# --- tensor blobs -------------------------------------------------------------
# header: rank (u64), extents (u64 each), precision tag (u64: 32 or 64); then raw LE values


def tensor_to_bytes(t: np.ndarray) -> bytes:
    tag = _PRECISION_TAGS.get(np.dtype(t.dtype).name)
    if tag is None:
        raise DimensionError(f"unsupported dtype {t.dtype}")
    header = struct.pack(f"<Q{t.ndim}QQ", t.ndim, *t.shape, tag)
    return header + np.ascontiguousarray(t, dtype=_TAG_DTYPES[tag]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor blob at ``offset``; returns (tensor, offset after it)."""
    try:
        (rank,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        if rank > _MAX_RANK:
            raise WireFormatError(f"tensor blob claims rank {rank}")
        shape = struct.unpack_from(f"<{rank}Q", buf, offset)
        offset += 8 * rank
        (tag,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
    except struct.error as exc:
        raise WireFormatError(f"tensor blob header truncated at offset {offset}") from exc
    if tag not in _TAG_DTYPES:
        raise WireFormatError(f"unknown precision tag {tag}")
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buf):
        raise WireFormatError("tensor blob truncated")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True), offset + nbytes
