"""Byte-level corpus, per-replica shards and batch sampling."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusTooSmallError
from .linalg import DATA_STREAM, SHARD_STREAM, RngStream

logger = logging.getLogger(__name__)

VOCAB_SIZE = 256
SYNTHETIC_STREAM = 4

_SYLLABLES = ("ka", "lo", "mi", "ra", "te", "su", "no", "vi", "da", "pe", "zo", "ri", "ha", "mu", "se", "ti")


@dataclass(frozen=True)
class Corpus:
    train: np.ndarray
    eval: np.ndarray
    source: str

    def __len__(self) -> int:
        return int(self.train.size + self.eval.size)


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def synthetic_text(n_bytes: int, seed: int = 0, n_words: int = 120) -> str:
    """Seeded word-level Markov text: each word has four possible successors."""
    rng = RngStream(seed, SYNTHETIC_STREAM)
    lengths = 1 + rng.integers(0, 3, size=n_words)
    picks = rng.integers(0, len(_SYLLABLES), size=int(lengths.sum()))
    words, at = [], 0
    for n in lengths:
        words.append("".join(_SYLLABLES[j] for j in picks[at : at + n]))
        at += n
    successors = rng.integers(0, n_words, size=(n_words, 4))

    out: list[str] = []
    size, w = 0, 0
    while size < n_bytes:
        branch = rng.integers(0, 4, size=4096)
        stops = rng.integers(0, 12, size=4096)
        for b, s in zip(branch, stops):
            piece = words[w] + (". " if s == 0 else " ")
            out.append(piece)
            size += len(piece)
            w = int(successors[w, b])
            if size >= n_bytes:
                break
    return "".join(out)[:n_bytes]


def load_corpus(
    path: str | Path | None = None,
    eval_fraction: float = 0.05,
    seed: int = 0,
    synthetic_bytes: int = 400_000,
) -> Corpus:
    """Token ids for a UTF-8 file, or for the synthetic text when ``path`` is None.

    The last ``eval_fraction`` of the stream is held out and never sharded.
    """
    if not 0 < eval_fraction < 1:
        raise ConfigError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    if path is None:
        tokens = encode_text(synthetic_text(synthetic_bytes, seed))
        source = f"synthetic:{synthetic_bytes}:{seed}"
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"corpus file not found: {p}")
        try:
            text = p.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"corpus file {p} is not UTF-8: {exc.reason} at byte {exc.start}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read corpus file {p}: {exc.strerror}") from exc
        tokens = encode_text(text)
        source = str(p)
    n_eval = int(len(tokens) * eval_fraction)
    if n_eval < 2 or len(tokens) - n_eval < 2:
        raise CorpusTooSmallError(f"corpus of {len(tokens)} bytes is too small to split")
    logger.info("corpus %s: %d train / %d eval tokens", source, len(tokens) - n_eval, n_eval)
    return Corpus(train=tokens[:-n_eval], eval=tokens[-n_eval:], source=source)


def shard_data(tokens: np.ndarray, replicas: int, seed: int, min_len: int = 2) -> list[np.ndarray]:
    """Contiguous, disjoint blocks covering ``tokens``; a seeded permutation assigns blocks to replicas."""
    if replicas < 1:
        raise ConfigError("need at least one replica")
    if len(tokens) < replicas * min_len:
        raise CorpusTooSmallError(f"{len(tokens)} tokens cannot give {replicas} shards of {min_len}")
    bounds = [len(tokens) * m // replicas for m in range(replicas + 1)]
    blocks = [tokens[bounds[m] : bounds[m + 1]] for m in range(replicas)]
    order = RngStream(seed, SHARD_STREAM).permutation(replicas)
    return [blocks[int(j)] for j in order]


class ShardSampler:
    """Draws (inputs, targets) windows from one shard and fingerprints the draw order."""

    def __init__(self, shard: np.ndarray, batch_size: int, seq_len: int, seed: int, shard_id: int):
        if len(shard) < seq_len + 1:
            raise CorpusTooSmallError(f"shard {shard_id} has {len(shard)} tokens, need {seq_len + 1}")
        self.shard = shard
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.shard_id = shard_id
        self._rng = RngStream(seed, DATA_STREAM + shard_id)
        self._digest = hashlib.sha256()
        self._window = np.arange(seq_len + 1)

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        offsets = self._rng.integers(0, len(self.shard) - self.seq_len, size=self.batch_size)
        self._digest.update(offsets.astype("<i8").tobytes())
        windows = self.shard[offsets[:, None] + self._window]
        return windows[:, :-1], windows[:, 1:]

    @property
    def digest(self) -> str:
        return self._digest.hexdigest()


def eval_batches(tokens: np.ndarray, batch_size: int, seq_len: int, n_batches: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed non-overlapping windows from the start of the eval split."""
    n_windows = (len(tokens) - 1) // seq_len
    if n_windows < 1:
        raise CorpusTooSmallError(f"eval split of {len(tokens)} tokens has no window of {seq_len + 1}")
    per = min(batch_size, n_windows)
    count = max(1, min(n_batches, n_windows // per))
    starts = np.arange(count * per) * seq_len
    windows = tokens[starts[:, None] + np.arange(seq_len + 1)]
    return [(windows[i : i + per, :-1], windows[i : i + per, 1:]) for i in range(0, count * per, per)]


def combined_digest(samplers: list[ShardSampler]) -> str:
    h = hashlib.sha256()
    for s in samplers:
        h.update(s.digest.encode("ascii"))
    return h.hexdigest()
