"""Subspace compression of inter-stage traffic and the embedding split it relies on.

A single orthonormal basis U (d x k) is shared by every compressed replica and
every stage boundary for the whole run. Activations cross a boundary as the k
coordinates of their residual against the fixed high-rank part
(T_perp[ids] + pos); gradients cross as g @ U and are expanded with U^T.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from .config import WIRE_VALUE_BYTES
from .errors import DegenerateBasisError, DimensionError, WireFormatError
from .linalg import (
    BASIS_STREAM,
    Precision,
    RngStream,
    dtype_for,
    matmul,
    orthonormal_tolerance,
    orthonormality_error,
    qr_orthonormalize,
)
from .model import ActivationPacket, Params, StageParams

logger = logging.getLogger(__name__)

WRITER_SUFFIXES = (".wo", ".w2")


@dataclass(frozen=True)
class ProjectionBasis:
    u: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if self.u.ndim != 2 or not self.u.shape[0] >= self.u.shape[1] >= 1:
            raise DimensionError(f"basis must be d x k with d >= k >= 1, got {self.u.shape}")
        err = orthonormality_error(self.u)
        if err >= orthonormal_tolerance(self.u.dtype):
            raise DegenerateBasisError(f"basis is not orthonormal (max |UᵀU - I| = {err:.3e})")

    @property
    def d(self) -> int:
        return self.u.shape[0]

    @property
    def k(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class EmbeddingSplit:
    """TE = t_s + t_perp; t_perp and pos are the read-only copies every stage holds."""

    t_s: np.ndarray
    t_perp: np.ndarray
    pos: np.ndarray

    def table(self) -> np.ndarray:
        return self.t_s + self.t_perp


def make_basis(seed: int, d: int, k: int, precision: Precision = "float64") -> ProjectionBasis:
    if not 1 <= k <= d:
        raise DimensionError(f"need 1 <= k <= d, got k={k}, d={d}")
    raw = RngStream(seed, BASIS_STREAM).gaussian((d, k))
    u = qr_orthonormalize(raw).astype(dtype_for(precision))
    logger.debug("basis seed=%d d=%d k=%d (compression %.2f%%)", seed, d, k, 100.0 * (1 - k / d))
    return ProjectionBasis(u, seed)


def subspace_dim(d: int, k_over_d: float) -> int:
    return max(1, int(round(d * k_over_d)))


def _check_width(x: np.ndarray, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise DimensionError(f"{what}: last extent {x.shape[-1]} != {width}")


def project(x: np.ndarray, basis: ProjectionBasis) -> np.ndarray:
    """x U Uᵀ along the last axis."""
    _check_width(x, basis.d, "project")
    u = basis.u.astype(x.dtype, copy=False)
    return matmul(matmul(x, u), u.T)


def _anchor(ids: np.ndarray, emb: EmbeddingSplit) -> np.ndarray:
    return emb.t_perp[ids] + emb.pos[: ids.shape[-1]]


def compress_activation(pkt: ActivationPacket, emb: EmbeddingSplit, basis: ProjectionBasis) -> ActivationPacket:
    if pkt.token_ids is None:
        raise DimensionError("compressed packets need token_ids")
    if pkt.compressed or pkt.x is None:
        raise DimensionError("compress_activation expects an uncompressed activation packet")
    _check_width(pkt.x, basis.d, "compress_activation")
    u = basis.u.astype(pkt.x.dtype, copy=False)
    coords = matmul(pkt.x - _anchor(pkt.token_ids, emb), u)
    return ActivationPacket(coords, pkt.token_ids, compressed=True)


def reconstruct_activation(pkt: ActivationPacket, emb: EmbeddingSplit, basis: ProjectionBasis) -> ActivationPacket:
    if pkt.token_ids is None:
        raise DimensionError("compressed packets need token_ids")
    if not pkt.compressed:
        raise DimensionError("reconstruct_activation expects a compressed packet")
    _check_width(pkt.x, basis.k, "reconstruct_activation")
    u = basis.u.astype(pkt.x.dtype, copy=False)
    x = matmul(pkt.x, u.T) + _anchor(pkt.token_ids, emb)
    return ActivationPacket(x, pkt.token_ids, compressed=False)


def compress_grad(g: np.ndarray, basis: ProjectionBasis) -> np.ndarray:
    _check_width(g, basis.d, "compress_grad")
    return matmul(g, basis.u.astype(g.dtype, copy=False))


def reconstruct_grad(g_compressed: np.ndarray, basis: ProjectionBasis) -> np.ndarray:
    # adjoint of x_hat = x_tilde Uᵀ + anchor
    _check_width(g_compressed, basis.k, "reconstruct_grad")
    return matmul(g_compressed, basis.u.astype(g_compressed.dtype, copy=False).T)


def split_embedding(te: np.ndarray, basis: ProjectionBasis, pos: np.ndarray) -> EmbeddingSplit:
    if not np.isfinite(te).all():
        raise DimensionError("embedding table contains non-finite values")
    t_s = project(te, basis)
    return EmbeddingSplit(t_s=t_s, t_perp=te - t_s, pos=pos.copy())


def reproject_embedding(emb: EmbeddingSplit, basis: ProjectionBasis) -> EmbeddingSplit:
    """Move T_S's out-of-subspace drift into T_perp (run after each outer sync only)."""
    projected = project(emb.t_s, basis)
    return replace(emb, t_s=projected, t_perp=emb.t_perp + (emb.t_s - projected))


def project_writers(params: Params, basis: ProjectionBasis) -> Params:
    """Row-project every residual writer (wo, w2) onto Col(U); other entries are shared."""
    return {name: project(value, basis) if name.endswith(WRITER_SUFFIXES) else value for name, value in params.items()}


def project_weights(stage: StageParams, basis: ProjectionBasis) -> StageParams:
    return replace(stage, params=project_writers(stage.params, basis))


def residual_out_of_subspace(
    x: np.ndarray, ids: np.ndarray, emb: EmbeddingSplit, basis: ProjectionBasis
) -> tuple[float, float]:
    """(‖(I - UUᵀ) r‖_F, ‖r‖_F) for the residual r = x - T_perp[ids] - pos."""
    residual = x - _anchor(ids, emb)
    outside = residual - project(residual, basis)
    return float(np.linalg.norm(outside)), float(np.linalg.norm(residual))


# --- wire layout --------------------------------------------------------------
# header (b, L, width, flags) u32; token ids i32[b*L]; values f32[b*L*width]

_PACKET_HEADER = struct.Struct("<IIII")
_FLAG_COMPRESSED = 1
_ID_BYTES = 4


def packet_nbytes(pkt: ActivationPacket) -> tuple[int, int]:
    """(payload, overhead) bytes of a forward packet on the wire."""
    payload = int(pkt.x.size) * WIRE_VALUE_BYTES
    overhead = _PACKET_HEADER.size + int(pkt.token_ids.size) * _ID_BYTES
    return payload, overhead


def grad_nbytes(g: np.ndarray) -> tuple[int, int]:
    """(payload, overhead) bytes of a backward gradient message."""
    return int(g.size) * WIRE_VALUE_BYTES, _PACKET_HEADER.size


def encode_packet(pkt: ActivationPacket) -> bytes:
    b, L, width = pkt.x.shape
    flags = _FLAG_COMPRESSED if pkt.compressed else 0
    return (
        _PACKET_HEADER.pack(b, L, width, flags)
        + np.asarray(pkt.token_ids, dtype="<i4").tobytes()
        + np.asarray(pkt.x, dtype="<f4").tobytes()
    )


def decode_packet(buf: bytes) -> ActivationPacket:
    try:
        b, L, width, flags = _PACKET_HEADER.unpack_from(buf, 0)
    except struct.error as exc:
        raise WireFormatError("truncated packet header") from exc
    n_ids, n_vals = b * L, b * L * width
    expected = _PACKET_HEADER.size + n_ids * _ID_BYTES + n_vals * WIRE_VALUE_BYTES
    if len(buf) != expected:
        raise WireFormatError(f"packet is {len(buf)} bytes, header implies {expected}")
    offset = _PACKET_HEADER.size
    ids = np.frombuffer(buf, dtype="<i4", count=n_ids, offset=offset).astype(np.int64).reshape(b, L)
    offset += n_ids * _ID_BYTES
    x = np.frombuffer(buf, dtype="<f4", count=n_vals, offset=offset).astype(np.float32).reshape(b, L, width)
    return ActivationPacket(x, ids, compressed=bool(flags & _FLAG_COMPRESSED))
