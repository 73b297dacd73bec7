"""File storage for runs: reports, CSV tables and checkpoints.

Each run lives in its own directory (``<RUNS_DATA_DIR>/<run_id>`` unless the
caller picks one). Every file is written to a temp name and renamed into
place, so a failed run never leaves a half-written artifact.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import subprocess
import uuid
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import __version__, config
from .model import Params, checkpoint_bytes, params_from_checkpoint

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"
SWEEP_FILE = "sweep.csv"
ABLATION_FILE = "ablation.csv"
ROUNDS_LOG = "rounds.jsonl"
CHECKPOINT_BLOB = "checkpoint.bin"
CHECKPOINT_MANIFEST = "checkpoint.json"

METRICS_COLUMNS = ("round", "eval_loss", "pp_bytes", "dp_bytes", "pp_overhead_bytes", "mean_replica_loss", "wallclock_s")
SWEEP_COLUMNS = ("bandwidth_bps", "k_over_d", "utilization", "wallclock_s")
ABLATION_COLUMNS = ("embedding_adaptation", "weight_projection", "seed", "initial_eval_loss", "final_eval_loss", "data_digest")


@lru_cache(maxsize=1)
def version_string() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=os.path.dirname(__file__),
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = out.stdout.strip()
    return f"{__version__}+{described}" if out.returncode == 0 and described else __version__


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


def ensure_runs_dir() -> None:
    Path(config.RUNS_DATA_DIR).mkdir(parents=True, exist_ok=True)


def get_run_dir(run_id: str) -> Path:
    return Path(config.RUNS_DATA_DIR) / run_id


def atomic_write(path: str | Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def write_json(path: str | Path, payload: Any) -> Path:
    return atomic_write(path, (json.dumps(payload, indent=2, sort_keys=False) + "\n").encode("utf-8"))


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return "" if value is None else str(value)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]], provenance: Dict[str, Any]) -> Path:
    """CSV with one leading ``#`` line carrying the version and resolved config."""
    buf = io.StringIO()
    buf.write("# " + json.dumps({"version": version_string(), **provenance}, sort_keys=True, separators=(",", ":")) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return atomic_write(path, buf.getvalue().encode("utf-8"))


def read_csv(path: str | Path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def create_run_record(
    run_dir: str | Path,
    run_id: str,
    kind: str,
    title: str,
    run_config: Dict[str, Any],
    result: Dict[str, Any],
) -> Dict[str, Any]:
    record = {
        "id": run_id,
        "kind": kind,
        "title": title,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "version": version_string(),
        "config": run_config,
        "result": result,
    }
    write_json(Path(run_dir) / CONFIG_FILE, {"version": record["version"], "config": run_config})
    write_json(Path(run_dir) / REPORT_FILE, record)
    logger.info("wrote %s", Path(run_dir) / REPORT_FILE)
    return record


def write_metrics(run_dir: str | Path, report, run_config: Dict[str, Any]) -> Path:
    rows = [
        (
            r.round,
            r.eval_loss,
            r.pp_bytes,
            r.dp_bytes,
            r.pp_overhead_bytes,
            float(np.mean(r.replica_losses)),
            r.wallclock_s,
        )
        for r in report.rounds
    ]
    return write_csv(Path(run_dir) / METRICS_FILE, METRICS_COLUMNS, rows, {"config": run_config})


def write_sweep(run_dir: str | Path, rows, run_config: Dict[str, Any]) -> Path:
    table = [(r.bandwidth_bps, r.k_over_d, r.utilization, r.wallclock_s) for r in rows]
    return write_csv(Path(run_dir) / SWEEP_FILE, SWEEP_COLUMNS, table, {"config": run_config})


def write_ablation(run_dir: str | Path, rows: Sequence[Sequence[Any]], run_config: Dict[str, Any]) -> Path:
    return write_csv(Path(run_dir) / ABLATION_FILE, ABLATION_COLUMNS, rows, {"config": run_config})


def save_checkpoint(run_dir: str | Path, params: Params, run_config: Optional[Dict[str, Any]] = None) -> Path:
    blob, manifest = checkpoint_bytes(params)
    atomic_write(Path(run_dir) / CHECKPOINT_BLOB, blob)
    write_json(
        Path(run_dir) / CHECKPOINT_MANIFEST,
        {"version": version_string(), "config": run_config or {}, "tensors": manifest},
    )
    return Path(run_dir) / CHECKPOINT_BLOB


def load_checkpoint(run_dir: str | Path) -> Params:
    with open(Path(run_dir) / CHECKPOINT_MANIFEST, "r", encoding="utf-8") as f:
        manifest = json.load(f)["tensors"]
    blob = (Path(run_dir) / CHECKPOINT_BLOB).read_bytes()
    return params_from_checkpoint(blob, manifest)


def get_run(run_id: str) -> Optional[Dict[str, Any]]:
    path = get_run_dir(run_id) / REPORT_FILE
    if not path.is_file():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def list_runs() -> List[Dict[str, Any]]:
    """Metadata of every stored run, newest first."""
    ensure_runs_dir()
    items: List[Dict[str, Any]] = []
    for entry in sorted(Path(config.RUNS_DATA_DIR).iterdir()):
        path = entry / REPORT_FILE
        if not path.is_file():
            continue
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        result = data.get("result", {})
        items.append(
            {
                "id": data.get("id", entry.name),
                "kind": data.get("kind"),
                "title": data.get("title", entry.name),
                "created_at": data.get("created_at"),
                "version": data.get("version"),
                "final_eval_loss": result.get("final_eval_loss"),
            }
        )
    items.sort(key=lambda x: x.get("created_at") or "", reverse=True)
    return items
