"""Heterogeneous SparseLoCo runs.

A cluster is M replicas. Each replica is either one well-connected group
(stages=1, or stages>1 with full-width channels) or an S-stage pipeline whose
inter-stage traffic is subspace-compressed. All replicas take part in the same
outer synchronization; after each sync the global token embedding is
re-projected so its learnable part stays inside the shared subspace.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from . import config
from .data import Corpus, ShardSampler, combined_digest, eval_batches, shard_data
from .errors import BiasIdentityError, ConfigError, DimensionError, NumericalFailure
from .model import (
    ActivationPacket,
    ModelConfig,
    Params,
    backward_stage,
    forward,
    forward_stage,
    init_model,
    loss,
    loss_and_grads,
    parameter_count,
    partition,
    reassemble,
)
from .perfmodel import HardwareSpec, LinkSpec, round_wallclock
from .sparseloco import (
    AdamWConfig,
    Batch,
    InnerOptState,
    LRSchedule,
    OuterConfig,
    ReplicaState,
    adamw_update,
    average_grads,
    clip_global_norm,
    compress_pseudograd,
    inner_step,
    lr_at,
    outer_round,
    pseudo_gradient,
)
from .subspace import (
    WRITER_SUFFIXES,
    EmbeddingSplit,
    ProjectionBasis,
    compress_activation,
    compress_grad,
    grad_nbytes,
    make_basis,
    packet_nbytes,
    project,
    project_weights,
    reconstruct_activation,
    reconstruct_grad,
    reproject_embedding,
    split_embedding,
    subspace_dim,
)
from .topk import densify, sparse_nbytes

logger = logging.getLogger(__name__)

Preset = Literal["baseline", "pp_compress", "het_half", "het", "adamw_ddp"]
PRESETS: tuple[str, ...] = ("baseline", "pp_compress", "het_half", "het", "adamw_ddp")


# --- configuration ------------------------------------------------------------


class ReplicaSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    replica_id: int
    pp_compressed: bool = False
    stages: int = 1
    k_over_d: float = 1.0
    shard_id: int | None = None

    @model_validator(mode="after")
    def _check(self) -> "ReplicaSpec":
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.pp_compressed and not (0 < self.k_over_d <= 1 and self.stages >= 2):
            raise ValueError("a compressed replica needs stages >= 2 and k_over_d in (0, 1]")
        return self

    @property
    def shard(self) -> int:
        return self.replica_id if self.shard_id is None else self.shard_id


class Seeds(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    model: int = 0
    data: int = 1
    basis: int = 2


class ClusterConfig(BaseModel):
    """Everything a run needs apart from the corpus."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    inner: AdamWConfig = Field(default_factory=lambda: AdamWConfig(lr=3e-3, warmup_steps=50))
    outer: OuterConfig = Field(default_factory=OuterConfig)
    replicas: list[ReplicaSpec]
    seeds: Seeds = Field(default_factory=Seeds)
    rounds: int = 60
    batch_size: int = 16
    eval_batches: int = 4
    embedding_adaptation: bool = True
    weight_projection: bool = False
    hardware: HardwareSpec = Field(default_factory=HardwareSpec)
    link: LinkSpec = Field(default_factory=lambda: LinkSpec(bandwidth_bps=1e9))
    dp_link: LinkSpec | None = None

    @model_validator(mode="after")
    def _check(self) -> "ClusterConfig":
        M = len(self.replicas)
        if M != self.outer.replicas:
            raise ValueError(f"{M} replica specs for M={self.outer.replicas}")
        if sorted(r.replica_id for r in self.replicas) != list(range(M)):
            raise ValueError("replica ids must be 0..M-1")
        bad = [r.replica_id for r in self.replicas if not 0 <= r.shard < M]
        if bad:
            raise ValueError(f"replicas {bad} point at shards outside 0..{M - 1}")
        for r in self.replicas:
            if self.model.n_layers % r.stages:
                raise ValueError(f"replica {r.replica_id}: {r.stages} stages do not divide {self.model.n_layers} layers")
        ratios = {r.k_over_d for r in self.replicas if r.pp_compressed}
        if len(ratios) > 1:
            raise ValueError("compressed replicas share one basis and so one k_over_d")
        if self.rounds < 0 or self.batch_size < 1 or self.eval_batches < 1:
            raise ValueError("rounds >= 0, batch_size >= 1 and eval_batches >= 1 required")
        return self

    @property
    def alpha(self) -> float:
        """Fraction of replicas running uncompressed."""
        return sum(not r.pp_compressed for r in self.replicas) / len(self.replicas)

    @property
    def compressed_ratio(self) -> float | None:
        return next((r.k_over_d for r in self.replicas if r.pp_compressed), None)

    @property
    def split_embedding(self) -> bool:
        return any(r.pp_compressed for r in self.replicas)


def het_assignment(replicas: int, alpha: float) -> list[bool]:
    """Compressed flags spreading (1 - alpha)·M compressed replicas evenly; alpha=1/2 gives odd indices."""
    n_plain = alpha * replicas
    if not 0 <= alpha <= 1 or abs(n_plain - round(n_plain)) > 1e-9:
        raise ConfigError(f"alpha={alpha} needs alpha·M integral for M={replicas}")
    c = replicas - int(round(n_plain))
    return [(m + 1) * c // replicas > m * c // replicas for m in range(replicas)]


def make_cluster(
    preset: Preset = "baseline",
    replicas: int = 4,
    stages: int = 4,
    k_over_d: float = 0.125,
    alpha: float | None = None,
    **overrides: Any,
) -> ClusterConfig:
    """Build a ClusterConfig for one of the named deployment settings.

    ``overrides`` are ClusterConfig fields (model, inner, outer, seeds, rounds, ...).
    ``outer`` may be an OuterConfig or a dict of its fields; M always follows ``replicas``.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose one of {', '.join(PRESETS)}")
    if preset == "het_half" and replicas % 2:
        raise ConfigError(f"het_half needs an even replica count, got M={replicas}")
    if preset == "het" and alpha is None:
        raise ConfigError("preset 'het' needs alpha")
    default_alpha = {"baseline": 1.0, "pp_compress": 0.0, "het_half": 0.5, "adamw_ddp": 1.0}
    a = alpha if alpha is not None else default_alpha[preset]
    flags = het_assignment(replicas, a)

    specs = [
        ReplicaSpec(
            replica_id=m,
            pp_compressed=flag,
            stages=stages,
            k_over_d=k_over_d if flag else 1.0,
        )
        for m, flag in enumerate(flags)
    ]

    outer = overrides.pop("outer", None)
    outer_fields = outer.model_dump(by_alias=False) if isinstance(outer, OuterConfig) else dict(outer or {})
    outer_fields["replicas"] = replicas
    inner = overrides.pop("inner", None)
    if preset == "adamw_ddp":
        # every step is a dense sync; a round is just a reporting window of inner_steps steps
        outer_fields.update(mode="ddp", dp_compress=False)
        if inner is None:
            inner = AdamWConfig(lr=3e-4, warmup_steps=50)
    if inner is not None:
        overrides["inner"] = inner
    return ClusterConfig(replicas=specs, outer=OuterConfig(**outer_fields), **overrides)


# --- pipeline with metered channels -------------------------------------------


@dataclass
class ChannelMeter:
    payload_bytes: int = 0
    overhead_bytes: int = 0
    messages: int = 0

    def add(self, sizes: tuple[int, int]) -> None:
        payload, overhead = sizes
        self.payload_bytes += payload
        self.overhead_bytes += overhead
        self.messages += 1

    def reset(self) -> tuple[int, int]:
        out = (self.payload_bytes, self.overhead_bytes)
        self.payload_bytes = self.overhead_bytes = self.messages = 0
        return out


class ReplicaPipeline:
    """Runs one replica's stages in order and carries traffic between them through in-process channels."""

    def __init__(self, spec: ReplicaSpec, cfg: ModelConfig, basis: ProjectionBasis | None):
        if spec.pp_compressed and basis is None:
            raise ConfigError(f"replica {spec.replica_id} is compressed but no basis was built")
        self.spec = spec
        self.cfg = cfg
        self.basis = basis if spec.pp_compressed else None
        self.emb: EmbeddingSplit | None = None
        self.meter = ChannelMeter()

    @property
    def compressed(self) -> bool:
        return self.basis is not None

    def _send_forward(self, pkt: ActivationPacket) -> ActivationPacket:
        if self.basis is None:
            self.meter.add(packet_nbytes(pkt))
            return pkt
        wire = compress_activation(pkt, self.emb, self.basis)
        self.meter.add(packet_nbytes(wire))
        return reconstruct_activation(wire, self.emb, self.basis)

    def _send_backward(self, g: np.ndarray) -> np.ndarray:
        if self.basis is None:
            self.meter.add(grad_nbytes(g))
            return g
        wire = compress_grad(g, self.basis)
        self.meter.add(grad_nbytes(wire))
        return reconstruct_grad(wire, self.basis)

    def loss_and_grads(self, params: Params, batch: Batch) -> tuple[float, Params]:
        inputs, targets = batch
        tok_perp = self.emb.t_perp if self.emb is not None else None
        if self.spec.stages == 1:
            return loss_and_grads(params, self.cfg, inputs, targets, tok_perp)
        stages = partition(params, self.cfg, stages=self.spec.stages, tok_perp=tok_perp)
        tapes = []
        pkt = ActivationPacket(None, inputs)
        for s, stage in enumerate(stages):
            try:
                pkt, tape = forward_stage(stage, pkt, self.cfg)
            except NumericalFailure as exc:
                raise exc.at_replica(self.spec.replica_id) from exc
            tapes.append(tape)
            if s < len(stages) - 1:
                pkt = self._send_forward(pkt)
        value, g = loss(pkt.x, targets)
        grads: Params = {}
        for s in range(len(stages) - 1, -1, -1):
            try:
                g, stage_grads = backward_stage(tapes[s], g)
            except NumericalFailure as exc:
                raise exc.at_replica(self.spec.replica_id) from exc
            grads.update(stage_grads)
            if s > 0:
                g = self._send_backward(g)
        return value, {name: grads[name] for name in params}


# --- global state, sync and bias diagnostics ----------------------------------


@dataclass
class GlobalState:
    params: Params
    emb: EmbeddingSplit | None = None

    def table(self) -> np.ndarray:
        tok = self.params["embed.tok"]
        return tok if self.emb is None else tok + self.emb.t_perp


@dataclass
class SyncResult:
    state: GlobalState
    dp_bytes: list[int]
    bias_gap: float | None


def _dense(part) -> np.ndarray:
    return part if isinstance(part, np.ndarray) else densify(part)


def _global_norm(tensors: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(t, dtype=np.float64))) for t in tensors.values()))


def replica_bias_gap(contributions: Sequence[Mapping[str, Any]], compressed: Sequence[bool]) -> float | None:
    """‖mean(compressed updates) - mean(uncompressed updates)‖ when both kinds are present."""
    packed = [c for c, flag in zip(contributions, compressed) if flag]
    plain = [c for c, flag in zip(contributions, compressed) if not flag]
    if not packed or not plain:
        return None
    gap = {}
    for name in contributions[0]:
        a = sum(_dense(c[name]).astype(np.float64) for c in packed) / len(packed)
        b = sum(_dense(c[name]).astype(np.float64) for c in plain) / len(plain)
        gap[name] = a - b
    return _global_norm(gap)


def broadcast(state: GlobalState, replicas: Sequence[ReplicaState], pipelines: Sequence[ReplicaPipeline]) -> None:
    for r, pipe in zip(replicas, pipelines):
        r.params = {k: v.copy() for k, v in state.params.items()}
        pipe.emb = state.emb


def repair_embedding(state: GlobalState, basis: ProjectionBasis | None, adapt: bool) -> GlobalState:
    """Re-project T_S after a sync and refresh the positional snapshot receivers use."""
    if state.emb is None:
        return state
    emb = EmbeddingSplit(t_s=state.params["embed.tok"], t_perp=state.emb.t_perp, pos=state.params["embed.pos"].copy())
    if adapt:
        emb = reproject_embedding(emb, basis)
    params = dict(state.params)
    params["embed.tok"] = emb.t_s
    return GlobalState(params, emb)


def global_sync(
    replicas: Sequence[ReplicaState],
    state: GlobalState,
    cfg: ClusterConfig,
    basis: ProjectionBasis | None,
    pipelines: Sequence[ReplicaPipeline] = (),
) -> SyncResult:
    """Form pseudo-gradients, exchange them (Top-k + error feedback when enabled), apply the
    outer step, repair the embedding split and broadcast the result."""
    ordered = sorted(replicas, key=lambda r: r.replica_id)
    contributions, dp_bytes = {}, []
    for r in ordered:
        deltas = pseudo_gradient(state.params, r)
        if cfg.outer.dp_compress:
            sent = compress_pseudograd(r, deltas, cfg.outer)
            dp_bytes.append(sum(sparse_nbytes(sd) for sd in sent.values()))
        else:
            sent = deltas
            dp_bytes.append(sum(int(d.size) for d in deltas.values()) * config.WIRE_VALUE_BYTES)
        contributions[r.replica_id] = sent
    gap = replica_bias_gap(list(contributions.values()), [r.compressed for r in ordered])
    params = outer_round(state.params, contributions, cfg.outer.eta, cfg.outer.replicas)
    new_state = repair_embedding(GlobalState(params, state.emb), basis, cfg.embedding_adaptation)
    if pipelines:
        broadcast(new_state, replicas, pipelines)
    return SyncResult(new_state, dp_bytes, gap)


@dataclass
class BiasReport:
    """Split of an ideal update into the part compressed replicas can express and the bias B."""

    alpha: float
    delta_star: Any
    delta_proj: Any
    bias: Any
    delta_het: Any
    norm_delta_star: float
    norm_proj: float
    norm_bias: float
    norm_het_gap: float
    identity_error: float


def _projectable(name: str, value: np.ndarray, d: int) -> bool:
    return value.shape[-1] == d and (name == "embed.tok" or name.endswith(WRITER_SUFFIXES) or name == "delta")


def bias_decompose(delta_star: np.ndarray | Mapping[str, np.ndarray], basis: ProjectionBasis, alpha: float) -> BiasReport:
    """Delta_het = alpha·Delta* + (1-alpha)·Pi(Delta*), checked against Delta* - (1-alpha)·B.

    A bare array is projected along its last axis; in a parameter dict only
    T_S and the residual writers (trailing extent d) are projected.
    """
    if not 0 <= alpha <= 1:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    single = isinstance(delta_star, np.ndarray)
    tensors = {"delta": delta_star} if single else dict(delta_star)
    if single and delta_star.shape[-1] != basis.d:
        raise DimensionError(f"delta trailing extent {delta_star.shape[-1]} != d={basis.d}")

    proj, bias, het = {}, {}, {}
    worst, scale = 0.0, 0.0
    for name, v in tensors.items():
        p = project(v, basis) if _projectable(name, v, basis.d) else v.copy()
        b = v - p
        h = alpha * v + (1.0 - alpha) * p
        alt = v - (1.0 - alpha) * b
        proj[name], bias[name], het[name] = p, b, h
        if v.size:
            worst = max(worst, float(np.max(np.abs(h - alt))))
            scale = max(scale, float(np.max(np.abs(v))))
    tol = (1e-10 if all(v.dtype == np.float64 for v in tensors.values()) else 1e-5) * (1.0 + scale)
    if worst > tol:
        raise BiasIdentityError(f"decomposition forms disagree by {worst:.3e}")

    gap = {name: het[name] - tensors[name] for name in tensors}
    unwrap = (lambda t: t["delta"]) if single else (lambda t: t)
    return BiasReport(
        alpha=alpha,
        delta_star=unwrap(tensors),
        delta_proj=unwrap(proj),
        bias=unwrap(bias),
        delta_het=unwrap(het),
        norm_delta_star=_global_norm(tensors),
        norm_proj=_global_norm(proj),
        norm_bias=_global_norm(bias),
        norm_het_gap=_global_norm(gap),
        identity_error=worst,
    )


# --- inner phase ---------------------------------------------------------------


def project_stage_writers(params: Params, cfg: ModelConfig, stages: int, basis: ProjectionBasis) -> Params:
    """Apply project_weights stage by stage and hand back the flat parameter dict."""
    return reassemble([project_weights(stage, basis) for stage in partition(params, cfg, stages=stages)], cfg)


def run_inner_phase(
    replica: ReplicaState,
    pipe: ReplicaPipeline,
    sampler: ShardSampler,
    steps: int,
    inner: AdamWConfig,
    schedule: LRSchedule,
    weight_projection: bool = False,
) -> ReplicaState:
    """H inner AdamW steps on one replica; compressed replicas route stage traffic through the basis."""
    for _ in range(steps):
        try:
            inner_step(replica, sampler.next_batch(), pipe.loss_and_grads, inner, schedule)
        except NumericalFailure as exc:
            if exc.replica is None:
                raise exc.at_replica(replica.replica_id) from exc
            raise
        if weight_projection and pipe.compressed:
            replica.params.update(project_stage_writers(replica.params, pipe.cfg, pipe.spec.stages, pipe.basis))
    return replica


async def _gather_in_threads(jobs: Sequence[Callable[[], Any]], threads: int) -> list[Any]:
    sem = asyncio.Semaphore(max(1, threads))

    async def one(job):
        async with sem:
            return await asyncio.to_thread(job)

    return await asyncio.gather(*(one(job) for job in jobs))


def run_parallel(jobs: Sequence[Callable[[], Any]], threads: int) -> list[Any]:
    """Run jobs on up to ``threads`` workers; results come back in job order."""
    if threads <= 1:
        return [job() for job in jobs]
    return asyncio.run(_gather_in_threads(jobs, threads))


# --- experiment -------------------------------------------------------------------


class RoundRecord(BaseModel):
    round: int
    replica_losses: list[float]
    eval_loss: float
    dp_bytes: int
    pp_bytes: int
    pp_overhead_bytes: int
    wallclock_s: float
    bias_gap: float | None = None


class RunReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run_id: str | None = None
    version: str = ""
    config: dict[str, Any]
    preset: str | None = None
    alpha: float
    corpus: str
    initial_eval_loss: float
    final_eval_loss: float
    rounds: list[RoundRecord] = Field(default_factory=list)
    total_dp_bytes: int = 0
    total_pp_bytes: int = 0
    total_pp_overhead_bytes: int = 0
    data_digest: str = ""
    elapsed_s: float = 0.0


def evaluate(params: Params, cfg: ModelConfig, batches: Sequence[Batch], tok_perp: np.ndarray | None = None) -> float:
    losses = [loss(forward(params, cfg, x, tok_perp), y)[0] for x, y in batches]
    return float(np.mean(losses))


@dataclass
class _Run:
    cfg: ClusterConfig
    basis: ProjectionBasis | None
    state: GlobalState
    replicas: list[ReplicaState]
    pipelines: list[ReplicaPipeline]
    samplers: list[ShardSampler]
    eval_set: list[Batch]
    schedule: LRSchedule
    shared_opt: InnerOptState | None = None
    records: list[RoundRecord] = field(default_factory=list)


def init_run(cfg: ClusterConfig, corpus: Corpus) -> _Run:
    mc = cfg.model
    params = init_model(mc, cfg.seeds.model)
    basis = None
    emb = None
    if cfg.split_embedding:
        basis = make_basis(cfg.seeds.basis, mc.d_model, subspace_dim(mc.d_model, cfg.compressed_ratio), mc.precision)
        emb = split_embedding(params["embed.tok"], basis, params["embed.pos"])
        params["embed.tok"] = emb.t_s
    state = GlobalState(params, emb)

    M = cfg.outer.replicas
    for spec in cfg.replicas:
        if not 0 <= spec.shard < M:
            raise ConfigError(f"replica {spec.replica_id}: shard {spec.shard} outside 0..{M - 1}")
    shards = shard_data(corpus.train, M, cfg.seeds.data, min_len=mc.seq_len + 1)
    replicas, pipelines, samplers = [], [], []
    for spec in cfg.replicas:
        replicas.append(ReplicaState.fresh(spec.replica_id, params, spec.shard, spec.pp_compressed))
        pipe = ReplicaPipeline(spec, mc, basis)
        pipe.emb = emb
        pipelines.append(pipe)
        samplers.append(ShardSampler(shards[spec.shard], cfg.batch_size, mc.seq_len, cfg.seeds.data, spec.shard))
    total_steps = max(1, cfg.rounds * cfg.outer.inner_steps)
    shared = InnerOptState.zeros_like(params) if cfg.outer.mode == "ddp" else None
    return _Run(
        cfg=cfg,
        basis=basis,
        state=state,
        replicas=replicas,
        pipelines=pipelines,
        samplers=samplers,
        eval_set=eval_batches(corpus.eval, cfg.batch_size, mc.seq_len, cfg.eval_batches),
        schedule=cfg.inner.schedule(total_steps),
        shared_opt=shared,
    )


def _sparseloco_round(run: _Run, threads: int) -> tuple[list[int], float | None]:
    cfg = run.cfg
    jobs = [
        (lambda r=r, p=p, s=s: run_inner_phase(r, p, s, cfg.outer.inner_steps, cfg.inner, run.schedule, cfg.weight_projection))
        for r, p, s in zip(run.replicas, run.pipelines, run.samplers)
    ]
    run.replicas = run_parallel(jobs, threads)
    result = global_sync(run.replicas, run.state, cfg, run.basis, run.pipelines)
    run.state = result.state
    return result.dp_bytes, result.bias_gap


def _ddp_round(run: _Run, threads: int) -> tuple[list[int], float | None]:
    """H synchronous steps: dense gradients averaged every step, one shared AdamW."""
    cfg = run.cfg
    dp_bytes = [0] * len(run.replicas)
    gaps = []
    for _ in range(cfg.outer.inner_steps):
        jobs = [
            (lambda p=p, s=s: p.loss_and_grads(run.state.params, s.next_batch()))
            for p, s in zip(run.pipelines, run.samplers)
        ]
        results = run_parallel(jobs, threads)
        for r, (value, _) in zip(run.replicas, results):
            if not math.isfinite(value):
                raise NumericalFailure("non-finite loss", replica=r.replica_id)
            r.losses.append(value)
        grads_list = [g for _, g in results]
        gap = replica_bias_gap(grads_list, [r.compressed for r in run.replicas])
        if gap is not None:
            gaps.append(gap)
        for m, g in enumerate(grads_list):
            dp_bytes[m] += sum(int(t.size) for t in g.values()) * config.WIRE_VALUE_BYTES
        grads, _ = clip_global_norm(average_grads(grads_list), cfg.inner.clip_norm)
        run.shared_opt.step += 1
        params = {k: v.copy() for k, v in run.state.params.items()}
        adamw_update(params, grads, run.shared_opt, cfg.inner, lr_at(run.shared_opt.step, run.schedule))
        if cfg.weight_projection and run.basis is not None:
            # one shared model, so writers stay in the subspace whenever any replica compresses
            params.update(project_stage_writers(params, cfg.model, 1, run.basis))
        run.state = repair_embedding(GlobalState(params, run.state.emb), run.basis, cfg.embedding_adaptation)
        broadcast(run.state, run.replicas, run.pipelines)
    return dp_bytes, (float(np.mean(gaps)) if gaps else None)


def train(
    cfg: ClusterConfig,
    corpus: Corpus,
    threads: int | None = None,
    progress: bool | None = None,
    rounds_log: str | Path | None = None,
    preset: str | None = None,
) -> tuple[RunReport, Params]:
    """Execute every outer round. Returns the report and the final global parameters,
    with T_perp folded back into ``embed.tok``."""
    threads = config.DEFAULT_THREADS if threads is None else threads
    progress = config.SHOW_PROGRESS if progress is None else progress
    started = time.perf_counter()
    run = init_run(cfg, corpus)
    mc = cfg.model
    n_params = parameter_count(mc)
    tokens_per_step = cfg.batch_size * mc.seq_len

    def eval_now() -> float:
        return evaluate(run.state.params, mc, run.eval_set, run.state.emb.t_perp if run.state.emb else None)

    initial = eval_now()
    logger.info(
        "run: M=%d alpha=%.3f mode=%s rounds=%d H=%d params=%d initial eval %.4f",
        cfg.outer.replicas, cfg.alpha, cfg.outer.mode, cfg.rounds, cfg.outer.inner_steps, n_params, initial,
    )
    log_file = None
    if rounds_log is not None:
        Path(rounds_log).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(rounds_log, "w", encoding="utf-8")
    step_round = _ddp_round if cfg.outer.mode == "ddp" else _sparseloco_round
    try:
        for t in tqdm(range(1, cfg.rounds + 1), desc="outer rounds", disable=not progress, leave=False):
            for pipe in run.pipelines:
                pipe.meter.reset()
            marks = [len(r.losses) for r in run.replicas]
            dp_bytes, gap = step_round(run, threads)
            metered = [pipe.meter.reset() for pipe in run.pipelines]
            pp_payload = sum(p for p, _ in metered)
            pp_overhead = sum(o for _, o in metered)
            record = RoundRecord(
                round=t,
                replica_losses=[float(np.mean(r.losses[k:])) for r, k in zip(run.replicas, marks)],
                eval_loss=eval_now(),
                dp_bytes=sum(dp_bytes),
                pp_bytes=pp_payload,
                pp_overhead_bytes=pp_overhead,
                wallclock_s=round_wallclock(
                    n_params,
                    tokens_per_step,
                    cfg.outer.inner_steps,
                    max(p for p, _ in metered),
                    max(dp_bytes),
                    cfg.hardware,
                    cfg.link,
                    cfg.dp_link,
                ),
                bias_gap=gap,
            )
            run.records.append(record)
            logger.info(
                "round %d: eval %.4f  replica loss %s  dp %d B  pp %d B",
                t, record.eval_loss, " ".join(f"{v:.4f}" for v in record.replica_losses), record.dp_bytes, record.pp_bytes,
            )
            if log_file is not None:
                log_file.write(json.dumps(record.model_dump()) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()

    report = RunReport(
        config=cfg.model_dump(mode="json"),
        preset=preset,
        alpha=cfg.alpha,
        corpus=corpus.source,
        initial_eval_loss=initial,
        final_eval_loss=run.records[-1].eval_loss if run.records else initial,
        rounds=run.records,
        total_dp_bytes=sum(r.dp_bytes for r in run.records),
        total_pp_bytes=sum(r.pp_bytes for r in run.records),
        total_pp_overhead_bytes=sum(r.pp_overhead_bytes for r in run.records),
        data_digest=combined_digest(run.samplers),
        elapsed_s=time.perf_counter() - started,
    )
    params = dict(run.state.params)
    params["embed.tok"] = run.state.table()
    return report, params


def run_experiment(cfg: ClusterConfig, corpus: Corpus, **kwargs: Any) -> RunReport:
    """Execute every outer round and collect per-round losses, byte counts and eval loss."""
    report, _ = train(cfg, corpus, **kwargs)
    return report


