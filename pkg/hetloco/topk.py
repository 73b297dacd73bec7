"""Chunked Top-k sparsification with error feedback.

Each tensor is flattened row-major and cut into ``chunk_len`` pieces; every
chunk keeps its ``k_per_chunk`` largest-magnitude entries (the final partial
chunk keeps min(k, len)). Ties go to the lowest flat index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .config import WIRE_INDEX_BYTES, WIRE_VALUE_BYTES
from .errors import DimensionError, WireFormatError


class ChunkSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    chunk_len: int = 4096
    k_per_chunk: int = 32

    @model_validator(mode="after")
    def _check(self) -> "ChunkSpec":
        if not 1 <= self.k_per_chunk <= self.chunk_len:
            raise ValueError(f"need 1 <= k_per_chunk <= chunk_len, got {self.k_per_chunk}/{self.chunk_len}")
        if self.chunk_len > 65536:
            raise ValueError("chunk_len must fit 16-bit local indices")
        return self

    def chunk_sizes(self, total_len: int) -> list[int]:
        full, tail = divmod(total_len, self.chunk_len)
        return [self.chunk_len] * full + ([tail] if tail else [])

    def kept(self, total_len: int) -> int:
        return sum(min(self.k_per_chunk, size) for size in self.chunk_sizes(total_len))

    def density(self, total_len: int) -> float:
        return self.kept(total_len) / total_len if total_len else 0.0


@dataclass(frozen=True)
class SparseDelta:
    shape: tuple[int, ...]
    spec: ChunkSpec
    indices: list[np.ndarray]  # per chunk, local, strictly increasing
    values: list[np.ndarray]

    @property
    def total_len(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nnz(self) -> int:
        return sum(len(i) for i in self.indices)

    def flat_positions(self) -> np.ndarray:
        parts = [idx.astype(np.int64) + c * self.spec.chunk_len for c, idx in enumerate(self.indices)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def flat_values(self) -> np.ndarray:
        return np.concatenate(self.values) if self.values else np.zeros(0)


@dataclass(frozen=True)
class ErrorAccumulator:
    e: np.ndarray
    beta: float = 0.95

    @classmethod
    def zeros_like(cls, like: np.ndarray, beta: float = 0.95) -> "ErrorAccumulator":
        return cls(np.zeros_like(like), beta)


def _select(block: np.ndarray, k: int) -> np.ndarray:
    """Column positions of the k largest |values| per row, ascending; stable sort gives lowest-index ties."""
    order = np.argsort(-np.abs(block), axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def topk_chunks(e: np.ndarray, spec: ChunkSpec) -> SparseDelta:
    flat = np.asarray(e).reshape(-1)
    C, k = spec.chunk_len, spec.k_per_chunk
    n_full = flat.size // C
    indices: list[np.ndarray] = []
    values: list[np.ndarray] = []
    if n_full:
        block = flat[: n_full * C].reshape(n_full, C)
        order = _select(block, k)
        picked = np.take_along_axis(block, order, axis=1)
        indices.extend(order.astype(np.uint16))
        values.extend(picked.copy())
    tail = flat[n_full * C :]
    if tail.size:
        order = _select(tail, min(k, tail.size))
        indices.append(order.astype(np.uint16))
        values.append(tail[order].copy())
    return SparseDelta(tuple(np.shape(e)), spec, indices, values)


def quantize(sd: SparseDelta) -> SparseDelta:
    """Q(.) hook; training runs without quantization, so values pass through untouched."""
    return sd


def densify(sd: SparseDelta) -> np.ndarray:
    dtype = sd.values[0].dtype if sd.values else np.float64
    out = np.zeros(sd.total_len, dtype=dtype)
    out[sd.flat_positions()] = sd.flat_values()
    return out.reshape(sd.shape)


def ef_accumulate(acc: ErrorAccumulator, delta: np.ndarray) -> ErrorAccumulator:
    """e <- beta*e + delta"""
    if acc.e.shape != np.shape(delta):
        raise DimensionError(f"error accumulator {acc.e.shape} vs delta {np.shape(delta)}")
    return ErrorAccumulator(acc.beta * acc.e + delta, acc.beta)


def ef_subtract(acc: ErrorAccumulator, sd: SparseDelta) -> ErrorAccumulator:
    """Remove the transmitted coordinates; untouched entries keep their exact bits."""
    if acc.e.shape != sd.shape:
        raise DimensionError(f"error accumulator {acc.e.shape} vs sparse delta {sd.shape}")
    sizes = sd.spec.chunk_sizes(sd.total_len)
    if len(sd.indices) > len(sizes):
        raise DimensionError("sparse delta has more chunks than the accumulator")
    for c, idx in enumerate(sd.indices):
        if idx.size and int(idx.max()) >= sizes[c]:
            raise DimensionError(f"index {int(idx.max())} out of range for chunk {c}")
    e = acc.e.copy()
    flat = e.reshape(-1)
    flat[sd.flat_positions()] -= sd.flat_values().astype(e.dtype, copy=False)
    return ErrorAccumulator(e, acc.beta)


# --- wire format --------------------------------------------------------------
# header (total_len u64, chunk_len u32, k u32); per chunk: count u32, indices u16[], values f32[]

_HEADER = struct.Struct("<QII")
_COUNT = struct.Struct("<I")


def sparse_nbytes(sd: SparseDelta) -> int:
    return _HEADER.size + sum(_COUNT.size + len(i) * (WIRE_INDEX_BYTES + WIRE_VALUE_BYTES) for i in sd.indices)


def encode_sparse(sd: SparseDelta) -> bytes:
    parts = [_HEADER.pack(sd.total_len, sd.spec.chunk_len, sd.spec.k_per_chunk)]
    for idx, val in zip(sd.indices, sd.values):
        parts.append(_COUNT.pack(len(idx)))
        parts.append(np.asarray(idx, dtype="<u2").tobytes())
        parts.append(np.asarray(val, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_sparse(buf: bytes, shape: tuple[int, ...] | None = None) -> SparseDelta:
    try:
        total_len, chunk_len, k = _HEADER.unpack_from(buf, 0)
    except struct.error as exc:
        raise WireFormatError("truncated sparse header") from exc
    spec = ChunkSpec(chunk_len=chunk_len, k_per_chunk=k)
    shape = tuple(shape) if shape is not None else (total_len,)
    if int(np.prod(shape, dtype=np.int64)) != total_len:
        raise WireFormatError(f"shape {shape} does not hold {total_len} elements")
    offset = _HEADER.size
    indices, values = [], []
    for size in spec.chunk_sizes(total_len):
        if offset + _COUNT.size > len(buf):
            raise WireFormatError("truncated chunk header")
        (count,) = _COUNT.unpack_from(buf, offset)
        offset += _COUNT.size
        if count != min(k, size) or offset + count * (WIRE_INDEX_BYTES + WIRE_VALUE_BYTES) > len(buf):
            raise WireFormatError(f"bad chunk count {count}")
        idx = np.frombuffer(buf, dtype="<u2", count=count, offset=offset).astype(np.uint16)
        offset += count * WIRE_INDEX_BYTES
        val = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32)
        offset += count * WIRE_VALUE_BYTES
        if count and (np.any(np.diff(idx.astype(np.int64)) <= 0) or int(idx[-1]) >= size):
            raise WireFormatError("chunk indices must be strictly increasing and in range")
        indices.append(idx)
        values.append(val)
    if offset != len(buf):
        raise WireFormatError(f"{len(buf) - offset} trailing bytes")
    return SparseDelta(shape, spec, indices, values)
