"""Micro decoder-only transformer (RMSNorm, causal MHA, SwiGLU) split into pipeline stages.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names:

    embed.tok, embed.pos,
    layers.{i}.attn_norm, layers.{i}.wq, .wk, .wv, .wo,
    layers.{i}.ffn_norm, layers.{i}.w1, .w3, .w2,
    final_norm, head

``wo`` and ``w2`` are the residual-stream writers that the subspace module
constrains. ``embed.tok`` is the learnable token table; when a run splits the
embedding, it holds T_S and the frozen T_⊥ travels beside the stages.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import ops
from .errors import DimensionError, NumericalFailure, PartitionError
from .linalg import MODEL_STREAM, Precision, RngStream, dtype_for, tensor_from_bytes, tensor_to_bytes

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]

_LAYER_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w3", "w2")


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: float = 2.5
    vocab: int = 256
    seq_len: int = 64
    precision: Precision = "float32"
    norm_eps: float = 1e-6
    init_std: float = 0.02

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if min(self.d_model, self.n_layers, self.n_heads, self.vocab, self.seq_len) < 1:
            raise ValueError("model extents must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ffn_hidden < 1:
            raise ValueError("ffn_mult too small")
        return self

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_mult * self.d_model))

    @property
    def dtype(self) -> np.dtype:
        return dtype_for(self.precision)


@dataclass
class ActivationPacket:
    """What crosses a stage boundary: activations (or logits) plus the token ids."""

    x: np.ndarray | None
    token_ids: np.ndarray
    compressed: bool = False


@dataclass
class StageParams:
    index: int
    layers: range
    params: Params
    is_first: bool
    is_last: bool
    tok_perp: np.ndarray | None = None


@dataclass
class Tape:
    stage_index: int
    records: list[tuple[str, Any]] = field(default_factory=list)


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["embed.tok", "embed.pos"]
    for i in range(cfg.n_layers):
        names.extend(f"layers.{i}.{key}" for key in _LAYER_KEYS)
    names.extend(["final_norm", "head"])
    return names


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.ffn_hidden
    layer = {
        "attn_norm": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "ffn_norm": (d,),
        "w1": (d, h),
        "w3": (d, h),
        "w2": (h, d),
    }
    shapes = {"embed.tok": (cfg.vocab, d), "embed.pos": (cfg.seq_len, d)}
    for i in range(cfg.n_layers):
        shapes.update({f"layers.{i}.{k}": s for k, s in layer.items()})
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, cfg.vocab)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    d, h, V, L = cfg.d_model, cfg.ffn_hidden, cfg.vocab, cfg.seq_len
    return V * d + L * d + cfg.n_layers * (4 * d * d + 3 * d * h + 2 * d) + d + d * V


def init_model(cfg: ModelConfig, seed: int) -> Params:
    """Gaussian init (std 0.02, residual writers scaled by 1/sqrt(2·n_layers)), unit norm gains."""
    rng = RngStream(seed, MODEL_STREAM)
    dtype = cfg.dtype
    writer_std = cfg.init_std / np.sqrt(2.0 * cfg.n_layers)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm"):
            params[name] = np.ones(shape, dtype=dtype)
            continue
        std = writer_std if name.endswith((".wo", ".w2")) else cfg.init_std
        params[name] = (rng.gaussian(shape) * std).astype(dtype)
    logger.debug("initialized %d parameters (seed=%d)", parameter_count(cfg), seed)
    return params


def _layer_of(name: str) -> int | None:
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return None


def partition(
    params: Params,
    cfg: ModelConfig,
    stages: int | None = None,
    splits: Sequence[int] | None = None,
    tok_perp: np.ndarray | None = None,
) -> list[StageParams]:
    """Cut the model into contiguous layer ranges.

    Either ``stages`` (must divide n_layers) or explicit ``splits`` (interior
    boundaries, nondecreasing in [0, n_layers]) is given. Arrays are shared,
    not copied.
    """
    n = cfg.n_layers
    if splits is None:
        if stages is None or stages < 1 or n % stages:
            raise PartitionError(f"cannot split {n} layers into {stages} equal stages")
        per = n // stages
        bounds = [per * s for s in range(stages + 1)]
    else:
        inner = list(splits)
        if any(b < 0 or b > n for b in inner) or any(x > y for x, y in zip(inner, inner[1:])):
            raise PartitionError(f"invalid split points {inner} for {n} layers")
        bounds = [0, *inner, n]

    count = len(bounds) - 1
    result = []
    for s in range(count):
        layers = range(bounds[s], bounds[s + 1])
        is_first, is_last = s == 0, s == count - 1
        owned: Params = {}
        for name, value in params.items():
            layer = _layer_of(name)
            if layer is not None:
                keep = layer in layers
            elif name.startswith("embed."):
                keep = is_first
            else:
                keep = is_last
            if keep:
                owned[name] = value
        result.append(
            StageParams(
                index=s,
                layers=layers,
                params=owned,
                is_first=is_first,
                is_last=is_last,
                tok_perp=tok_perp if is_first else None,
            )
        )
    return result


def reassemble(stages: Sequence[StageParams], cfg: ModelConfig) -> Params:
    merged: Params = {}
    for stage in stages:
        for name, value in stage.params.items():
            if name in merged:
                raise PartitionError(f"parameter {name} owned by two stages")
            merged[name] = value
    missing = set(param_names(cfg)) - set(merged)
    if missing:
        raise PartitionError(f"parameters not covered by any stage: {sorted(missing)}")
    return {name: merged[name] for name in param_names(cfg)}


# --- stage forward / backward -------------------------------------------------


def _embed_forward(stage: StageParams, ids: np.ndarray, tape: Tape) -> np.ndarray:
    tok, pos = stage.params["embed.tok"], stage.params["embed.pos"]
    L = ids.shape[1]
    if L > pos.shape[0]:
        raise DimensionError(f"sequence length {L} exceeds positional table {pos.shape[0]}")
    x = tok[ids] + pos[:L]
    if stage.tok_perp is not None:
        x = x + stage.tok_perp[ids]
    tape.records.append(("embed", (ids, tok.shape, pos.shape)))
    return x


def _embed_backward(cache, g: np.ndarray, grads: Params) -> np.ndarray:
    ids, tok_shape, pos_shape = cache
    grads["embed.tok"] = ops.embedding_backward(tok_shape, ids, g)
    dpos = np.zeros(pos_shape, dtype=g.dtype)
    dpos[: ids.shape[1]] = g.sum(axis=0)
    grads["embed.pos"] = dpos
    return g


def _block_forward(p: Params, i: int, x: np.ndarray, cfg: ModelConfig, tape: Tape) -> np.ndarray:
    pre = f"layers.{i}."
    wq, wk, wv, wo = (p[pre + k] for k in ("wq", "wk", "wv", "wo"))
    w1, w3, w2 = (p[pre + k] for k in ("w1", "w3", "w2"))

    a_in, norm1 = ops.rmsnorm_forward(x, p[pre + "attn_norm"], cfg.norm_eps)
    attn, attn_cache = ops.attention_forward(a_in @ wq, a_in @ wk, a_in @ wv, cfg.n_heads)
    x1 = x + attn @ wo

    f_in, norm2 = ops.rmsnorm_forward(x1, p[pre + "ffn_norm"], cfg.norm_eps)
    hidden, glu_cache = ops.swiglu_forward(f_in @ w1, f_in @ w3)
    x2 = x1 + hidden @ w2

    weights = (wq, wk, wv, wo, w1, w3, w2)
    tape.records.append(("block", (i, weights, a_in, norm1, attn_cache, attn, f_in, norm2, glu_cache, hidden)))
    return x2


def _block_backward(cache, g: np.ndarray, grads: Params) -> np.ndarray:
    i, weights, a_in, norm1, attn_cache, attn, f_in, norm2, glu_cache, hidden = cache
    wq, wk, wv, wo, w1, w3, w2 = weights
    pre = f"layers.{i}."

    dhidden, grads[pre + "w2"] = ops.linear_backward(hidden, w2, g)
    da, dc = ops.swiglu_backward(glu_cache, dhidden)
    df_a, grads[pre + "w1"] = ops.linear_backward(f_in, w1, da)
    df_c, grads[pre + "w3"] = ops.linear_backward(f_in, w3, dc)
    dx1_norm, grads[pre + "ffn_norm"] = ops.rmsnorm_backward(norm2, df_a + df_c)
    dx1 = g + dx1_norm

    dattn, grads[pre + "wo"] = ops.linear_backward(attn, wo, dx1)
    dq, dk, dv = ops.attention_backward(attn_cache, dattn)
    da_q, grads[pre + "wq"] = ops.linear_backward(a_in, wq, dq)
    da_k, grads[pre + "wk"] = ops.linear_backward(a_in, wk, dk)
    da_v, grads[pre + "wv"] = ops.linear_backward(a_in, wv, dv)
    dx_norm, grads[pre + "attn_norm"] = ops.rmsnorm_backward(norm1, da_q + da_k + da_v)
    return dx1 + dx_norm


def _head_forward(p: Params, x: np.ndarray, cfg: ModelConfig, tape: Tape) -> np.ndarray:
    xn, norm = ops.rmsnorm_forward(x, p["final_norm"], cfg.norm_eps)
    tape.records.append(("head", (p["head"], xn, norm)))
    return xn @ p["head"]


def _head_backward(cache, g: np.ndarray, grads: Params) -> np.ndarray:
    head, xn, norm = cache
    dxn, grads["head"] = ops.linear_backward(xn, head, g)
    dx, grads["final_norm"] = ops.rmsnorm_backward(norm, dxn)
    return dx


_BACKWARD = {"embed": _embed_backward, "block": _block_backward, "head": _head_backward}


def forward_stage(stage: StageParams, pkt: ActivationPacket, cfg: ModelConfig) -> tuple[ActivationPacket, Tape]:
    """Run one stage. The first stage embeds ``pkt.token_ids``; the last returns logits."""
    if pkt.compressed:
        raise DimensionError("forward_stage expects a reconstructed (uncompressed) packet")
    tape = Tape(stage.index)
    if stage.is_first:
        x = _embed_forward(stage, pkt.token_ids, tape)
    else:
        if pkt.x is None or pkt.x.shape[-1] != cfg.d_model:
            raise DimensionError(f"stage {stage.index} expects width {cfg.d_model}")
        x = pkt.x
    for i in stage.layers:
        x = _block_forward(stage.params, i, x, cfg, tape)
    if stage.is_last:
        x = _head_forward(stage.params, x, cfg, tape)
    if not np.isfinite(x).all():
        raise NumericalFailure("non-finite activations", stage=stage.index)
    return ActivationPacket(x=x, token_ids=pkt.token_ids, compressed=False), tape


def backward_stage(tape: Tape, grad_in: np.ndarray) -> tuple[np.ndarray, Params]:
    """Reverse the tape. Returns the gradient w.r.t. the stage input (the embedding
    output for the first stage) and this stage's parameter gradients."""
    grads: Params = {}
    g = grad_in
    for kind, cache in reversed(tape.records):
        if kind == "head" and g.shape[-1] != cache[0].shape[1]:
            raise DimensionError(f"gradient width {g.shape[-1]} does not match logits")
        g = _BACKWARD[kind](cache, g, grads)
    if not np.isfinite(g).all():
        raise NumericalFailure("non-finite gradients", stage=tape.stage_index)
    return g, grads


def loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise DimensionError(f"target id out of range [0, {vocab})")
    value, grad = ops.cross_entropy(logits, targets)
    if not np.isfinite(value):
        raise NumericalFailure("non-finite loss")
    return value, grad


def forward(params: Params, cfg: ModelConfig, ids: np.ndarray, tok_perp: np.ndarray | None = None) -> np.ndarray:
    """Monolithic forward to logits."""
    (stage,) = partition(params, cfg, stages=1, tok_perp=tok_perp)
    out, _ = forward_stage(stage, ActivationPacket(None, ids), cfg)
    return out.x


def loss_and_grads(
    params: Params,
    cfg: ModelConfig,
    inputs: np.ndarray,
    targets: np.ndarray,
    tok_perp: np.ndarray | None = None,
) -> tuple[float, Params]:
    (stage,) = partition(params, cfg, stages=1, tok_perp=tok_perp)
    out, tape = forward_stage(stage, ActivationPacket(None, inputs), cfg)
    value, dlogits = loss(out.x, targets)
    _, grads = backward_stage(tape, dlogits)
    return value, grads


# --- checkpoints --------------------------------------------------------------


def checkpoint_bytes(params: Params) -> tuple[bytes, dict[str, dict[str, Any]]]:
    """Concatenated tensor blobs plus a manifest name -> {shape, offset, nbytes, precision}."""
    chunks: list[bytes] = []
    manifest: dict[str, dict[str, Any]] = {}
    offset = 0
    for name, value in params.items():
        blob = tensor_to_bytes(value)
        manifest[name] = {
            "shape": list(value.shape),
            "offset": offset,
            "nbytes": len(blob),
            "precision": value.dtype.name,
        }
        chunks.append(blob)
        offset += len(blob)
    return b"".join(chunks), manifest


def params_from_checkpoint(blob: bytes, manifest: dict[str, dict[str, Any]]) -> Params:
    params: Params = {}
    for name, entry in manifest.items():
        value, _ = tensor_from_bytes(blob, entry["offset"])
        if list(value.shape) != list(entry["shape"]):
            raise DimensionError(f"checkpoint entry {name} has shape {value.shape}, manifest says {entry['shape']}")
        params[name] = value
    return params

