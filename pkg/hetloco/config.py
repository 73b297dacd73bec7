"""Environment-driven settings for hetloco."""

import os
from dotenv import load_dotenv

load_dotenv()


def _env_bool(name: str, default: str = "false") -> bool:
    return (os.getenv(name, default) or "").strip().lower() in {"1", "true", "yes", "y", "on"}


def _env_int(name: str, default: int) -> int:
    raw = (os.getenv(name) or "").strip()
    return int(raw) if raw else default


def _parse_list(value: str) -> list[str]:
    return [v.strip() for v in (value or "").split(",") if v.strip()]


# Where `train`, `perf` and `ablate` write when no --out is given; also what the API lists.
RUNS_DATA_DIR = os.getenv("HETLOCO_RUNS_DIR", "data/runs")

LOG_LEVEL = os.getenv("HETLOCO_LOG_LEVEL", "INFO").upper()

# Replica inner phases run on this many worker threads unless --threads overrides it.
DEFAULT_THREADS = _env_int("HETLOCO_THREADS", 1)

# tqdm bars for outer rounds
SHOW_PROGRESS = _env_bool("HETLOCO_PROGRESS", "true")

# Golden constants checked by `hetloco verify`
GOLDEN_PATH = os.getenv(
    "HETLOCO_GOLDEN_PATH",
    os.path.join(os.path.dirname(__file__), "golden", "constants.json"),
)

# Frontends allowed to read run reports from the API
CORS_ORIGINS = _parse_list(
    os.getenv(
        "CORS_ORIGINS",
        "http://localhost:5173,http://localhost:3000",
    )
)

API_PORT = _env_int("PORT", 8001)

# Wire element size for inter-stage values (32-bit LE floats) and Top-k values/indices.
WIRE_VALUE_BYTES = 4
WIRE_INDEX_BYTES = 2
