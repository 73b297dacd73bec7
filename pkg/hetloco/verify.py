"""Named acceptance checks behind ``hetloco verify``.

Each check raises VerificationError with expected/actual on failure and
returns a one-line summary on success. Checks marked slow only run with
``--slow``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import config
from .data import ShardSampler, encode_text, load_corpus, synthetic_text
from .errors import ConfigError, HetLocoError, VerificationError
from .hetero import (
    ClusterConfig,
    ReplicaPipeline,
    ReplicaSpec,
    bias_decompose,
    make_cluster,
    run_experiment,
    run_inner_phase,
)
from .linalg import RngStream, orthonormality_error
from .model import ActivationPacket, ModelConfig, init_model, loss_and_grads, parameter_count, param_shapes
from .perfmodel import (
    SCENARIOS,
    HardwareSpec,
    LinkSpec,
    PerfScenario,
    dp_bytes_per_round,
    pp_bytes_per_step,
    ratio_family,
    step_compute_time,
    sweep,
    utilization,
    wallclock,
)
from .sparseloco import AdamWConfig, OuterConfig, ReplicaState, compress_pseudograd, inner_step, outer_round, pseudo_gradient
from .subspace import (
    EmbeddingSplit,
    ProjectionBasis,
    compress_activation,
    make_basis,
    project,
    reconstruct_activation,
    reproject_embedding,
    residual_out_of_subspace,
    split_embedding,
)
from .topk import ChunkSpec, ErrorAccumulator, densify, ef_accumulate, ef_subtract, topk_chunks

logger = logging.getLogger(__name__)

TINY = ModelConfig(d_model=16, n_layers=4, n_heads=2, ffn_mult=2.0, vocab=256, seq_len=8, precision="float64", init_std=0.1)
TINY32 = TINY.model_copy(update={"precision": "float32"})


@dataclass
class Check:
    name: str
    fn: Callable[[], str]
    slow: bool = False


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


CHECKS: dict[str, Check] = {}


def check(name: str, slow: bool = False):
    def register(fn: Callable[[], str]) -> Callable[[], str]:
        CHECKS[name] = Check(name, fn, slow)
        return fn

    return register


def _expect(ok: bool, what: str, expected, actual) -> None:
    if not ok:
        raise VerificationError(f"{what}: expected {expected}, got {actual}")


def _batch(cfg: ModelConfig, b: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    ids = RngStream(seed, 9).integers(0, cfg.vocab, size=(b, cfg.seq_len + 1))
    return ids[:, :-1], ids[:, 1:]


@check("orthonormality")
def check_orthonormality() -> str:
    worst_orth = worst_idem = 0.0
    for d in (16, 64, 512):
        for k in sorted({1, d // 8, d}):
            basis = make_basis(7, d, k, "float64")
            worst_orth = max(worst_orth, orthonormality_error(basis.u))
            x = RngStream(8, d).gaussian((4, d))
            p = project(x, basis)
            worst_idem = max(worst_idem, float(np.max(np.abs(project(p, basis) - p))))
    _expect(worst_orth < 1e-10, "max |UᵀU - I|", "< 1e-10", worst_orth)
    _expect(worst_idem < 1e-9, "projector idempotence", "< 1e-9", worst_idem)
    return f"orthonormality {worst_orth:.1e}, idempotence {worst_idem:.1e}"


@check("topk_oracle")
def check_topk_oracle() -> str:
    spec = ChunkSpec()
    data = RngStream(11, 0).gaussian((1000, spec.chunk_len))
    # exact ties at the top of every seventh chunk
    data[::7, 100] = 10.0
    data[::7, 200] = -10.0
    data[::7, 300] = 10.0
    # equal magnitudes everywhere: the lowest 32 positions must win
    data[5] = np.where(np.arange(spec.chunk_len) % 2, 1.0, -1.0)
    sd = topk_chunks(data, spec)
    positions = np.arange(spec.chunk_len)
    for c, row in enumerate(data):
        oracle = np.sort(np.lexsort((positions, -np.abs(row)))[: spec.k_per_chunk])
        if not np.array_equal(sd.indices[c].astype(np.int64), oracle):
            raise VerificationError(f"chunk {c}: expected indices {oracle.tolist()}, got {sd.indices[c].tolist()}")
    density = spec.density(data.size)
    _expect(density == 0.0078125, "density", 0.0078125, density)
    return f"1000 chunks match, density {density:.7f}"


@check("ef_conservation")
def check_ef_conservation() -> str:
    rng = RngStream(12, 0)
    spec = ChunkSpec(chunk_len=256, k_per_chunk=8)
    for i in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 60, size=2))
        e = rng.gaussian(shape).astype(np.float32)
        delta = rng.gaussian(shape).astype(np.float32)
        beta = float(rng.integers(0, 1000)) / 1000.0
        acc = ef_accumulate(ErrorAccumulator(e, beta), delta)
        sd = topk_chunks(acc.e, spec)
        after = ef_subtract(acc, sd)
        if not np.array_equal(densify(sd) + after.e, acc.e):
            raise VerificationError(f"triple {i}: densify(sent) + e_next != beta*e + delta")
    return "100 triples conserve exactly"


@check("pipeline_equivalence")
def check_pipeline_equivalence() -> str:
    params = init_model(TINY, 3)
    batch = _batch(TINY, 3, 4)
    ref_loss, ref_grads = loss_and_grads(params, TINY, *batch)
    worst = 0.0
    for stages in (1, 2, 4):
        pipe = ReplicaPipeline(ReplicaSpec(replica_id=0, stages=stages), TINY, None)
        value, grads = pipe.loss_and_grads(params, batch)
        worst = max(worst, abs(value - ref_loss) / abs(ref_loss))
        for name, g in ref_grads.items():
            scale = max(float(np.max(np.abs(g))), 1e-300)
            worst = max(worst, float(np.max(np.abs(grads[name] - g))) / scale)
    _expect(worst < 1e-10, "max relative diff", "< 1e-10", worst)
    return f"S in {{1,2,4}} max rel diff {worst:.1e}"


@check("gradient_fd")
def check_gradient_fd() -> str:
    params = init_model(TINY, 5)
    inputs, targets = _batch(TINY, 2, 6)
    _, grads = loss_and_grads(params, TINY, inputs, targets)
    eps = 1e-4
    classes = ["embed.tok", "embed.pos", "final_norm", "head"] + [n for n in param_shapes(TINY) if n.startswith("layers.0.")]
    classes += [n for n in param_shapes(TINY) if n.startswith(f"layers.{TINY.n_layers - 1}.")]
    worst = 0.0
    for name in classes:
        g = grads[name].reshape(-1)
        for flat in np.argsort(-np.abs(g), kind="stable")[:2]:
            p = params[name].reshape(-1)
            orig = p[flat]
            p[flat] = orig + eps
            up, _ = loss_and_grads(params, TINY, inputs, targets)
            p[flat] = orig - eps
            down, _ = loss_and_grads(params, TINY, inputs, targets)
            p[flat] = orig
            fd = (up - down) / (2 * eps)
            rel = abs(fd - g[flat]) / max(abs(fd), abs(g[flat]), 1e-12)
            if rel >= 1e-4:
                raise VerificationError(f"{name}[{flat}]: expected {fd:.8e} (finite difference), got {g[flat]:.8e}")
            worst = max(worst, rel)
    return f"{len(classes)} parameter tensors, max rel err {worst:.1e}"


@check("degenerate_sparseloco")
def check_degenerate_sparseloco() -> str:
    tokens = encode_text(synthetic_text(20_000, seed=3))
    inner = AdamWConfig(lr=1e-3, warmup_steps=10)
    schedule = inner.schedule(100)
    outer = OuterConfig(inner_steps=10, eta=1.0, beta=0.0, chunk=ChunkSpec(chunk_len=4096, k_per_chunk=4096), replicas=1)
    start = init_model(TINY32, 0)

    def grad_fn(p, b):
        return loss_and_grads(p, TINY32, *b)

    plain = ReplicaState.fresh(0, start)
    plain_data = ShardSampler(tokens, 4, TINY32.seq_len, 1, 0)
    for _ in range(100):
        inner_step(plain, plain_data.next_batch(), grad_fn, inner, schedule)

    theta = {k: v.copy() for k, v in start.items()}
    local = ReplicaState.fresh(0, theta)
    local_data = ShardSampler(tokens, 4, TINY32.seq_len, 1, 0)
    for _ in range(10):
        for _ in range(outer.inner_steps):
            inner_step(local, local_data.next_batch(), grad_fn, inner, schedule)
        sent = compress_pseudograd(local, pseudo_gradient(theta, local), outer)
        theta = outer_round(theta, [sent], outer.eta, 1)
        local.params = {k: v.copy() for k, v in theta.items()}
    worst = max(float(np.max(np.abs(theta[k] - plain.params[k]))) for k in theta)
    _expect(worst < 1e-6, "max |theta_sparseloco - theta_adamw|", "< 1e-6", worst)
    return f"100 steps / 10 rounds, max abs diff {worst:.1e}"


@check("subspace_roundtrip")
def check_subspace_roundtrip() -> str:
    rng = RngStream(13, 0)
    d, k, b, L, V = 64, 8, 2, 16, 50
    basis = ProjectionBasis(make_basis(5, d, k).u.astype(np.float32), 5)
    emb = split_embedding(rng.gaussian((V, d)).astype(np.float32), basis, rng.gaussian((L, d)).astype(np.float32))
    ids = rng.integers(0, V, size=(b, L))
    anchor = emb.t_perp[ids] + emb.pos[:L]
    inside = (rng.gaussian((b, L, k)).astype(np.float32) @ basis.u.T) + anchor
    back = reconstruct_activation(compress_activation(ActivationPacket(inside, ids), emb, basis), emb, basis)
    err_in = float(np.max(np.abs(back.x - inside)))
    _expect(err_in < 1e-5, "in-subspace roundtrip error", "< 1e-5", err_in)

    x = rng.gaussian((b, L, d)).astype(np.float32)
    back = reconstruct_activation(compress_activation(ActivationPacket(x, ids), emb, basis), emb, basis)
    lost = float(np.linalg.norm(back.x - x))
    outside, _ = residual_out_of_subspace(x, ids, emb, basis)
    rel = abs(lost - outside) / outside
    _expect(rel < 1e-4, "roundtrip error vs out-of-subspace residual", "< 1e-4 relative", rel)
    return f"inside err {err_in:.1e}, residual agreement {rel:.1e}"


@check("embedding_split")
def check_embedding_split() -> str:
    rng = RngStream(14, 0)
    d, V = 64, 100
    basis = ProjectionBasis(make_basis(6, d, 8).u.astype(np.float32), 6)
    te = rng.gaussian((V, d)).astype(np.float32)
    emb = split_embedding(te, basis, np.zeros((4, d), dtype=np.float32))
    split_err = float(np.max(np.abs(emb.table() - te)))
    drifted = EmbeddingSplit(emb.t_s + 0.1 * rng.gaussian((V, d)).astype(np.float32), emb.t_perp, emb.pos)
    fixed = reproject_embedding(drifted, basis)
    reproj_err = float(np.max(np.abs(fixed.table() - drifted.table())))
    leak = float(np.max(np.abs(fixed.t_s - project(fixed.t_s, basis))))
    _expect(split_err < 1e-6, "split T_S + T_perp vs TE", "< 1e-6", split_err)
    _expect(reproj_err < 1e-6, "reprojection T_S + T_perp vs before", "< 1e-6", reproj_err)
    _expect(leak < 1e-6, "|T_S - Pi(T_S)|", "< 1e-6", leak)
    return f"split {split_err:.1e}, reprojection {reproj_err:.1e}, leak {leak:.1e}"


@check("bias_identity")
def check_bias_identity() -> str:
    hand = bias_decompose(np.array([2.0, 4.0]), ProjectionBasis(np.array([[1.0], [0.0]])), 0.5)
    _expect(np.allclose(hand.delta_het, [2.0, 2.0], atol=0, rtol=0), "hand case", "(2, 2)", hand.delta_het)
    rng = RngStream(15, 0)
    worst = 0.0
    for i in range(100):
        d = int(rng.integers(2, 65))
        k = int(rng.integers(1, d + 1))
        alpha = float(rng.integers(0, 1001)) / 1000.0
        basis = make_basis(100 + i, d, k)
        rep = bias_decompose(rng.gaussian((3, d)), basis, alpha)
        worst = max(worst, rep.identity_error)
        expected = (1 - alpha) * rep.norm_bias
        _expect(abs(rep.norm_het_gap - expected) <= 1e-10 * (1 + expected), f"instance {i} gap norm", expected, rep.norm_het_gap)
    _expect(worst < 1e-10, "identity error", "< 1e-10", worst)
    return f"hand case (2, 2); 100 instances, max error {worst:.1e}"


def _tiny_run(preset: str, alpha: float | None = None):
    corpus = load_corpus(None, synthetic_bytes=30_000, seed=2)
    cfg = make_cluster(
        preset,
        replicas=2,
        stages=2,
        k_over_d=0.25,
        alpha=alpha,
        model=TINY32,
        outer={"inner_steps": 2},
        rounds=2,
        batch_size=2,
        eval_batches=1,
    )
    return run_experiment(cfg, corpus, threads=1, progress=False)


@check("degenerate_alpha")
def check_degenerate_alpha() -> str:
    for alpha, preset in ((1.0, "baseline"), (0.0, "pp_compress")):
        het = _tiny_run("het", alpha)
        ref = _tiny_run(preset)
        a = [r.model_dump() for r in het.rounds]
        b = [r.model_dump() for r in ref.rounds]
        _expect(a == b, f"alpha={alpha} trace", f"identical to {preset}", "different traces")
    return "alpha=1 == baseline, alpha=0 == pp_compress"


@check("perf_checkpoint")
def check_perf_checkpoint() -> str:
    base, hw = SCENARIOS["70b"], HardwareSpec()
    grid = np.linspace(1e8, 1e9, 10)
    lowest = min(utilization(base, hw, LinkSpec(bandwidth_bps=float(bw))) for bw in grid)
    _expect(lowest >= 0.97, "utilization over [100 Mb/s, 1 Gb/s]", ">= 0.97", lowest)
    rows = sweep(ratio_family(base), grid, hw)
    by_ratio: dict[float, list[float]] = {}
    for row in rows:
        by_ratio.setdefault(row.k_over_d, []).append(row.utilization)
    for ratio, utils in by_ratio.items():
        _expect(all(a <= b for a, b in zip(utils, utils[1:])), f"monotone in bandwidth at k/d={ratio}", "nondecreasing", utils)
    ordered = [by_ratio[r] for r in sorted(by_ratio)]
    for tighter, looser in zip(ordered, ordered[1:]):
        _expect(all(a >= b for a, b in zip(tighter, looser)), "monotone in compression", "smaller k/d >= utilization", "violated")
    link = LinkSpec(bandwidth_bps=1e9)
    steps = base.total_steps
    lhs = wallclock(base, hw, link, steps) * utilization(base, hw, link)
    rhs = steps * step_compute_time(base, hw)
    _expect(abs(lhs - rhs) <= 1e-12 * rhs, "wallclock·utilization vs steps·T_c", rhs, lhs)
    return f"min utilization {lowest:.4f} on [0.1, 1] Gb/s"


def _metered_bytes(b: int, L: int, d: int, k_over_d: float, S: int, H: int) -> tuple[int, int, float]:
    cfg = ModelConfig(d_model=d, n_layers=4, n_heads=2, vocab=256, seq_len=L, precision="float32")
    params = init_model(cfg, 0)
    basis = make_basis(1, d, int(d * k_over_d), "float32")
    emb = split_embedding(params["embed.tok"], basis, params["embed.pos"])
    params["embed.tok"] = emb.t_s
    pipe = ReplicaPipeline(ReplicaSpec(replica_id=0, pp_compressed=True, stages=S, k_over_d=k_over_d), cfg, basis)
    pipe.emb = emb
    tokens = encode_text(synthetic_text(5_000, seed=1))
    sampler = ShardSampler(tokens, b, L, 0, 0)
    inner = AdamWConfig()
    run_inner_phase(ReplicaState.fresh(0, params, compressed=True), pipe, sampler, H, inner, inner.schedule(H))
    scenario = PerfScenario(
        param_count=1, d_model=d, seq_len=L, micro_batch=b, microbatches=1, stages=S,
        k_over_d=k_over_d, act_bytes=4, tokens_per_step=b * L,
    )
    return pipe.meter.payload_bytes, pipe.meter.overhead_bytes, H * pp_bytes_per_step(scenario)


@check("byte_meter")
def check_byte_meter() -> str:
    configs = ((2, 8, 16, 0.25, 2, 2), (3, 4, 16, 0.5, 4, 1), (1, 8, 32, 0.125, 2, 3))
    for b, L, d, r, S, H in configs:
        payload, overhead, closed = _metered_bytes(b, L, d, r, S, H)
        _expect(payload == closed, f"payload bytes (b={b}, L={L}, d={d}, k/d={r}, S={S}, H={H})", closed, payload)
        expect_overhead = H * (S - 1) * (2 * 16 + b * L * 4)
        _expect(overhead == expect_overhead, "overhead bytes", expect_overhead, overhead)
    return f"{len(configs)} configs agree with the closed form"


@check("golden")
def check_golden() -> str:
    try:
        with open(config.GOLDEN_PATH, "r", encoding="utf-8") as f:
            golden = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise VerificationError(f"golden file {config.GOLDEN_PATH} unreadable: {exc}") from exc
    if not isinstance(golden, dict):
        raise VerificationError(f"golden file {config.GOLDEN_PATH} must hold a JSON object")
    base = SCENARIOS["70b"]
    actual = {
        "topk_density": ChunkSpec().density(4096),
        "pp_bytes_70b_one_microbatch": pp_bytes_per_step(base.model_copy(update={"microbatches": 1})),
        "step_compute_70b_peak1e15_s": step_compute_time(base, HardwareSpec(peak_flops=1e15)),
        "dp_bytes_70b_per_round": dp_bytes_per_round(base),
        "default_parameter_count": parameter_count(ModelConfig()),
    }
    for key, value in actual.items():
        if key not in golden:
            raise VerificationError(f"golden file lacks {key!r}")
        try:
            expected = float(golden[key])
        except (TypeError, ValueError) as exc:
            raise VerificationError(f"golden {key!r} is not a number: {golden[key]!r}") from exc
        _expect(abs(expected - value) <= 1e-9 * max(1.0, abs(value)), key, golden[key], value)
    return f"{len(actual)} constants match"


# Trend runs use a short context so the whole plan fits the 15-minute limit on one
# core. Width stays 64, so k/d of 1/8 and 1/32 both give whole subspace widths.
TREND_MODEL = ModelConfig(seq_len=32)
TREND_BATCH = 4
TREND_SEEDS = (0, 1, 2)
TREND_TIME_LIMIT_S = 15 * 60
# a single core sustains roughly 1.4e10 flop/s on these shapes; keep the plan near half the limit
TREND_FLOP_BUDGET = 6e12


@dataclass(frozen=True)
class TrendRun:
    label: str
    seed: int
    cluster: ClusterConfig


def _trend_cluster(seed: int, preset: str, k_over_d: float = 0.125) -> ClusterConfig:
    return make_cluster(
        preset,
        k_over_d=k_over_d,
        model=TREND_MODEL,
        batch_size=TREND_BATCH,
        seeds={"model": seed, "data": seed + 1, "basis": seed + 2},
    )


def trend_plan() -> list[TrendRun]:
    """Gated presets on every seed; the k/d=1/32 comparison is reported from the first seed only."""
    runs = [
        TrendRun(preset, seed, _trend_cluster(seed, preset))
        for seed in TREND_SEEDS
        for preset in ("baseline", "het_half", "pp_compress")
    ]
    runs.append(TrendRun("pp_compress_1_32", TREND_SEEDS[0], _trend_cluster(TREND_SEEDS[0], "pp_compress", 1 / 32)))
    return runs


def plan_flops(runs: Sequence[TrendRun]) -> float:
    """6·params·tokens over every inner step of every run."""
    total = 0.0
    for run in runs:
        c = run.cluster
        steps = c.rounds * c.outer.replicas * c.outer.inner_steps
        total += 6.0 * parameter_count(c.model) * steps * c.batch_size * c.model.seq_len
    return total


@check("training_trends", slow=True)
def check_training_trends() -> str:
    runs = trend_plan()
    cost = plan_flops(runs)
    _expect(cost <= TREND_FLOP_BUDGET, "trend plan cost", f"<= {TREND_FLOP_BUDGET:.2e} flop", f"{cost:.2e}")
    corpus = load_corpus(None)
    started = time.perf_counter()
    finals: dict[str, list[float]] = {}
    for run in runs:
        report = run_experiment(run.cluster, corpus, progress=False)
        _expect(
            report.final_eval_loss < 0.8 * report.initial_eval_loss,
            f"{run.label} seed {run.seed} final loss",
            f"< {0.8 * report.initial_eval_loss:.4f}",
            report.final_eval_loss,
        )
        finals.setdefault(run.label, []).append(report.final_eval_loss)
    elapsed = time.perf_counter() - started
    _expect(elapsed < TREND_TIME_LIMIT_S, "trend runtime", f"< {TREND_TIME_LIMIT_S} s", f"{elapsed:.0f} s")

    mean = {k: float(np.mean(v)) for k, v in finals.items()}
    gap = (mean["pp_compress"] - mean["baseline"]) / mean["baseline"]
    _expect(gap <= 0.15, "uniform PP-compress vs baseline", "<= 15% relative", f"{100 * gap:.1f}%")
    ordered = mean["baseline"] <= mean["het_half"] <= mean["pp_compress"]
    first = {k: v[0] for k, v in finals.items()}
    logger.info(
        "seed-mean final loss: %s; ordering baseline <= het <= uniform: %s; seed %d gap at k/d=1/8 %.1f%%, at 1/32 %.1f%%",
        ", ".join(f"{k}={v:.4f}" for k, v in mean.items()),
        ordered,
        TREND_SEEDS[0],
        100 * (first["pp_compress"] - first["baseline"]) / first["baseline"],
        100 * (first["pp_compress_1_32"] - first["baseline"]) / first["baseline"],
    )
    return f"gap {100 * gap:.1f}%, ordering {'holds' if ordered else 'does not hold'}, {elapsed:.0f} s"


def select(filters: Sequence[str] | None = None, slow: bool = False) -> list[Check]:
    chosen = [c for c in CHECKS.values() if slow or not c.slow]
    if filters:
        chosen = [c for c in CHECKS.values() if any(f in c.name for f in filters)]
        if not chosen:
            raise ConfigError(f"no check matches {', '.join(filters)}; known: {', '.join(CHECKS)}")
    return chosen


def run_checks(filters: Sequence[str] | None = None, slow: bool = False) -> list[CheckResult]:
    results = []
    for c in select(filters, slow):
        started = time.perf_counter()
        try:
            detail, passed = c.fn(), True
        except HetLocoError as exc:
            detail, passed = str(exc), False
        except AssertionError as exc:
            detail, passed = f"assertion failed: {exc}", False
        results.append(CheckResult(c.name, passed, detail, time.perf_counter() - started))
        logger.debug("check %s: %s", c.name, "ok" if passed else "FAILED")
    return results
