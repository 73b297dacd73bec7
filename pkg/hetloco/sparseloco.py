"""SparseLoCo: H local AdamW steps, then an error-feedback Top-k exchange of
pseudo-gradients and a plain SGD outer step on their mean."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DimensionError, NumericalFailure, SyncError
from .model import Params
from .topk import ChunkSpec, ErrorAccumulator, SparseDelta, densify, ef_accumulate, ef_subtract, quantize, topk_chunks

logger = logging.getLogger(__name__)

Batch = tuple[np.ndarray, np.ndarray]
Contribution = Mapping[str, SparseDelta | np.ndarray]
GradFn = Callable[[Params, Batch], tuple[float, Params]]


class AdamWConfig(BaseModel):
    """Inner optimizer. Defaults follow the published SparseLoCo recipe."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    warmup_steps: int = 500
    min_lr_ratio: float = 0.1

    @model_validator(mode="after")
    def _check(self) -> "AdamWConfig":
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("lr must be positive and betas in [0, 1)")
        if self.warmup_steps < 0 or not 0 <= self.min_lr_ratio <= 1:
            raise ValueError("warmup_steps >= 0 and min_lr_ratio in [0, 1] required")
        return self

    def schedule(self, total_steps: int) -> "LRSchedule":
        return LRSchedule(peak=self.lr, warmup_steps=self.warmup_steps, total_steps=total_steps, min_ratio=self.min_lr_ratio)


class LRSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    peak: float
    warmup_steps: int = 500
    total_steps: int
    min_ratio: float = 0.1


class OuterConfig(BaseModel):
    """Outer loop. Desk defaults (M=4, H=10); the published runs use H=50."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    inner_steps: int = Field(10, alias="H")
    eta: float = 1.0
    beta: float = 0.95
    chunk: ChunkSpec = Field(default_factory=ChunkSpec)
    replicas: int = Field(4, alias="M")
    dp_compress: bool = True
    mode: Literal["sparseloco", "ddp"] = "sparseloco"

    @model_validator(mode="after")
    def _check(self) -> "OuterConfig":
        if self.inner_steps < 1:
            raise ValueError("H must be >= 1")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must be in [0, 1)")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.replicas < 1:
            raise ValueError("M must be >= 1")
        return self


@dataclass
class InnerOptState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "InnerOptState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class ReplicaState:
    replica_id: int
    params: Params
    opt: InnerOptState
    shard_id: int
    compressed: bool = False
    errors: dict[str, ErrorAccumulator] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, replica_id: int, params: Params, shard_id: int | None = None, compressed: bool = False) -> "ReplicaState":
        own = {k: v.copy() for k, v in params.items()}
        return cls(replica_id, own, InnerOptState.zeros_like(own), replica_id if shard_id is None else shard_id, compressed)


def lr_at(step: int, schedule: LRSchedule) -> float:
    """Linear warmup to peak, then cosine decay to min_ratio*peak at total_steps."""
    peak, warmup = schedule.peak, schedule.warmup_steps
    if warmup and step < warmup:
        return peak * step / warmup
    span = schedule.total_steps - warmup
    if span <= 0:
        return peak
    progress = min(1.0, (step - warmup) / span)
    floor = schedule.min_ratio * peak
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: Params, max_norm: float | None) -> tuple[Params, float]:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, total


def adamw_update(params: Params, grads: Params, state: InnerOptState, cfg: AdamWConfig, lr: float) -> None:
    """One AdamW step in place; ``state.step`` must already count this step."""
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay and p.ndim >= 2:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def inner_step(r: ReplicaState, batch: Batch, grad_fn: GradFn, cfg: AdamWConfig, schedule: LRSchedule) -> ReplicaState:
    value, grads = grad_fn(r.params, batch)
    if not math.isfinite(value):
        raise NumericalFailure(f"non-finite loss at inner step {r.opt.step + 1}", replica=r.replica_id)
    grads, _ = clip_global_norm(grads, cfg.clip_norm)
    r.opt.step += 1
    adamw_update(r.params, grads, r.opt, cfg, lr_at(r.opt.step, schedule))
    r.losses.append(value)
    return r


def pseudo_gradient(global_params: Params, r: ReplicaState) -> Params:
    """Delta_m = theta_global - theta_m per tensor."""
    deltas: Params = {}
    for name, ref in global_params.items():
        local = r.params[name]
        if local.shape != ref.shape:
            raise DimensionError(f"{name}: replica shape {local.shape} vs global {ref.shape}")
        deltas[name] = ref - local
    return deltas


def compress_pseudograd(r: ReplicaState, deltas: Params, cfg: OuterConfig) -> dict[str, SparseDelta]:
    """e <- beta*e + Delta; send Q(TopK(e)); e <- e - sent. Updates ``r.errors``."""
    sent: dict[str, SparseDelta] = {}
    for name, delta in deltas.items():
        acc = r.errors.get(name) or ErrorAccumulator.zeros_like(delta, cfg.beta)
        acc = ef_accumulate(acc, delta)
        sd = quantize(topk_chunks(acc.e, cfg.chunk))
        r.errors[name] = ef_subtract(acc, sd)
        sent[name] = sd
    return sent


def outer_round(
    global_params: Params,
    contributions: Sequence[Contribution] | Mapping[int, Contribution],
    eta: float,
    replicas: int,
) -> Params:
    """theta <- theta - eta * mean(contributions), summed in replica-index order.

    A mapping is keyed by replica id and summed in sorted-id order whatever order it
    was filled in; a sequence is taken to be in index order already.
    """
    if len(contributions) != replicas:
        raise SyncError(f"expected {replicas} replica contributions, got {len(contributions)}")
    if isinstance(contributions, Mapping):
        ordered = [(m, contributions[m]) for m in sorted(contributions)]
    else:
        ordered = list(enumerate(contributions))
    updated: Params = {}
    for name, theta in global_params.items():
        total = np.zeros_like(theta)
        for m, contrib in ordered:
            if name not in contrib:
                raise SyncError(f"replica {m} sent no update for {name}")
            part = contrib[name]
            total += densify(part) if isinstance(part, SparseDelta) else part
        updated[name] = theta - eta * (total / replicas)
    return updated


def average_grads(grads_list: Sequence[Params]) -> Params:
    """Mean of per-replica gradients in replica-index order (DDP mode)."""
    if not grads_list:
        raise SyncError("no gradients to average")
    out = {k: np.zeros_like(g) for k, g in grads_list[0].items()}
    for grads in grads_list:
        for k in out:
            out[k] += grads[k]
    n = len(grads_list)
    return {k: v / n for k, v in out.items()}
