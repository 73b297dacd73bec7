"""``hetloco`` command line: train, perf, ablate, verify, serve."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config, hetero, perfmodel, storage
from .data import load_corpus
from .errors import ConfigError, HetLocoError, VerificationError
from .runconfig import RunConfig

logger = logging.getLogger("hetloco")


def _resolve(args: argparse.Namespace) -> tuple[RunConfig, str, Path]:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out or cfg.out
    if out:
        run_dir = Path(out)
        run_id = run_dir.name
    else:
        run_id = storage.new_run_id()
        run_dir = storage.get_run_dir(run_id)
    return cfg, run_id, run_dir


def _corpus(cfg: RunConfig):
    return load_corpus(cfg.train.corpus, cfg.train.eval_fraction, synthetic_bytes=cfg.train.synthetic_bytes)


def cmd_train(args: argparse.Namespace) -> int:
    cfg, run_id, run_dir = _resolve(args)
    cluster = cfg.to_cluster()
    corpus = _corpus(cfg)
    partial = run_dir / (storage.ROUNDS_LOG + ".partial")
    try:
        report, params = hetero.train(
            cluster, corpus, threads=args.threads, rounds_log=partial, preset=cfg.cluster.preset
        )
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    os.replace(partial, run_dir / storage.ROUNDS_LOG)
    report.run_id = run_id
    report.version = storage.version_string()
    provenance = cfg.provenance()
    storage.write_metrics(run_dir, report, provenance)
    storage.save_checkpoint(run_dir, params, provenance)
    title = f"{cfg.cluster.preset} M={cluster.outer.replicas} alpha={cluster.alpha:g}"
    storage.create_run_record(run_dir, run_id, "train", title, provenance, report.model_dump(mode="json"))
    print(
        f"{run_id}: eval loss {report.initial_eval_loss:.4f} -> {report.final_eval_loss:.4f}  "
        f"dp {report.total_dp_bytes} B  pp {report.total_pp_bytes} B  ({run_dir})"
    )
    return 0


def _parse_bandwidths(raw: str | None, cfg: RunConfig) -> list[float]:
    if raw is None:
        grid = list(cfg.perf.bandwidths)
    else:
        try:
            grid = [float(v) for v in raw.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"--bandwidths: {exc}") from exc
    if not grid:
        raise ConfigError("bandwidth grid is empty")
    return grid


def cmd_perf(args: argparse.Namespace) -> int:
    cfg, run_id, run_dir = _resolve(args)
    p = cfg.perf
    grid = _parse_bandwidths(args.bandwidths, cfg)
    dp_link = perfmodel.LinkSpec(bandwidth_bps=p.dp_bandwidth_bps) if p.dp_bandwidth_bps else None
    rows = perfmodel.sweep(perfmodel.ratio_family(p.scenario, p.ratios), grid, p.hardware, dp_link)
    cmp_cfg = p.compare
    comparison = perfmodel.compare_wallclock(
        cfg.compare_scenario(),
        p.hardware,
        perfmodel.LinkSpec(bandwidth_bps=cmp_cfg.bandwidth_bps),
        cmp_cfg.uncompressed_tokens,
        cmp_cfg.compressed_tokens,
        cmp_cfg.k_over_d,
        dp_link,
    )
    provenance = cfg.provenance()
    storage.write_sweep(run_dir, rows, provenance)
    result = {
        "scenario": p.scenario.model_dump(mode="json"),
        "rows": [r.model_dump() for r in rows],
        "comparison": {**comparison.model_dump(), "speedup": comparison.speedup},
    }
    storage.create_run_record(run_dir, run_id, "perf", f"perf sweep ({len(rows)} points)", provenance, result)
    for r in rows:
        print(f"{r.bandwidth_bps:>12.4g} bps  k/d={r.k_over_d:<8.5g} utilization {r.utilization:.4f}")
    print(
        f"wall-clock at {comparison.bandwidth_bps:.3g} bps: uncompressed {comparison.uncompressed_s:.4g} s, "
        f"compressed (+tokens) {comparison.compressed_s:.4g} s, speedup {comparison.speedup:.2f}x"
    )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg, run_id, run_dir = _resolve(args)
    changes = {}
    if not cfg.to_cluster().split_embedding:
        logger.info("config has no compressed replicas; ablating on the pp_compress preset")
        changes["preset"] = "pp_compress"
    corpus = _corpus(cfg)
    base_seed = cfg.seeds.model
    rows = []
    digests: dict[int, set[str]] = {}
    for adapt in (True, False):
        for proj in (True, False):
            for i in range(args.seeds):
                seeded = cfg.with_seed(base_seed + i) if args.seeds > 1 else cfg
                cluster = seeded.to_cluster(embedding_adaptation=adapt, weight_projection=proj, **changes)
                report = hetero.run_experiment(cluster, corpus, threads=args.threads)
                digests.setdefault(i, set()).add(report.data_digest)
                rows.append((adapt, proj, seeded.seeds.model, report.initial_eval_loss, report.final_eval_loss, report.data_digest))
                logger.info("ablation adapt=%s proj=%s seed=%d: final eval %.4f", adapt, proj, seeded.seeds.model, report.final_eval_loss)
    shared_order = all(len(d) == 1 for d in digests.values())
    with_adapt = float(np.mean([r[4] for r in rows if r[0]]))
    without = float(np.mean([r[4] for r in rows if not r[0]]))
    logger.info(
        "embedding adaptation: mean final %.4f vs %.4f without (%s); identical data order: %s",
        with_adapt, without, "helps" if with_adapt <= without else "does not help here", shared_order,
    )
    provenance = cfg.provenance()
    storage.write_ablation(run_dir, rows, provenance)
    result = {
        "rows": [dict(zip(storage.ABLATION_COLUMNS, r)) for r in rows],
        "identical_data_order": shared_order,
        "mean_final_with_adaptation": with_adapt,
        "mean_final_without_adaptation": without,
    }
    storage.create_run_record(run_dir, run_id, "ablate", "embedding adaptation x weight projection", provenance, result)
    for r in rows:
        print(f"adapt={str(r[0]):<5} proj={str(r[1]):<5} seed={r[2]}  final eval {r[4]:.4f}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    from . import verify

    if args.list:
        for c in verify.CHECKS.values():
            print(f"{c.name}{' (slow)' if c.slow else ''}")
        return 0
    filters = [f for raw in (args.filter or []) for f in raw.split(",") if f]
    results = verify.run_checks(filters or None, slow=args.slow)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} {r.seconds:7.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
    print(f"all {len(results)} checks passed")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .api import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetloco", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config JSON file")
    common.add_argument("--out", help=f"output directory (default {config.RUNS_DATA_DIR}/<run id>)")
    common.add_argument("--seed", type=int, help="model seed N (data N+1, basis N+2)")
    common.add_argument("--threads", type=int, default=config.DEFAULT_THREADS, help="replica worker threads")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run one experiment")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("perf", parents=[common], help="utilization sweep and wall-clock comparison")
    p.add_argument("--bandwidths", help="comma-separated bits/s grid (overrides perf.bandwidths)")
    p.set_defaults(func=cmd_perf)

    p = sub.add_parser("ablate", parents=[common], help="embedding adaptation x weight projection grid")
    p.add_argument("--seeds", type=int, default=1, help="seeds per grid cell")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the acceptance checks")
    p.add_argument("--filter", action="append", help="only checks whose name contains this (repeatable, comma-separated)")
    p.add_argument("--list", action="store_true", help="print check names and exit")
    p.add_argument("--slow", action="store_true", help="include multi-seed training checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("serve", help="serve stored runs over HTTP")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=config.API_PORT)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except HetLocoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
