import numpy as np
import pytest

from hetloco.data import (
    ShardSampler,
    combined_digest,
    encode_text,
    eval_batches,
    load_corpus,
    shard_data,
    synthetic_text,
)
from hetloco.errors import ConfigError, CorpusTooSmallError


def test_synthetic_text_is_seeded_and_sized():
    a = synthetic_text(5000, seed=1)
    assert len(a) == 5000
    assert a == synthetic_text(5000, seed=1)
    assert a != synthetic_text(5000, seed=2)


def test_corpus_holds_out_the_tail(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("abcdefghij" * 10, encoding="utf-8")
    corpus = load_corpus(path, eval_fraction=0.1)
    assert corpus.train.size == 90 and corpus.eval.size == 10
    np.testing.assert_array_equal(corpus.eval, encode_text("abcdefghij"))
    assert corpus.source == str(path)


def test_missing_corpus_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_corpus(tmp_path / "nope.txt")


def test_undecodable_corpus_is_a_config_error(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_bytes(b"\xff\xfe\x80" * 100)
    with pytest.raises(ConfigError, match="bad.txt"):
        load_corpus(path)


def test_tiny_corpus_is_rejected(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text("abc", encoding="utf-8")
    with pytest.raises(CorpusTooSmallError):
        load_corpus(path, eval_fraction=0.1)


def test_shards_are_disjoint_and_cover_the_stream():
    tokens = np.arange(103)
    shards = shard_data(tokens, 4, seed=0)
    joined = np.sort(np.concatenate(shards))
    np.testing.assert_array_equal(joined, tokens)
    assert all(np.all(np.diff(s) == 1) for s in shards)
    assert [s[0] for s in shard_data(tokens, 4, seed=0)] == [s[0] for s in shards]


def test_shard_rejects_short_stream():
    with pytest.raises(CorpusTooSmallError):
        shard_data(np.arange(5), 4, seed=0, min_len=2)


def test_sampler_is_deterministic_and_fingerprinted():
    shard = np.arange(500)
    a = ShardSampler(shard, batch_size=3, seq_len=8, seed=7, shard_id=1)
    b = ShardSampler(shard, batch_size=3, seq_len=8, seed=7, shard_id=1)
    c = ShardSampler(shard, batch_size=3, seq_len=8, seed=7, shard_id=2)
    for _ in range(3):
        (xa, ya), (xb, _), _ = a.next_batch(), b.next_batch(), c.next_batch()
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya[:, :-1], xa[:, 1:])
    assert a.digest == b.digest != c.digest
    assert combined_digest([a, c]) != combined_digest([c, a])


def test_eval_batches_are_fixed_windows():
    tokens = np.arange(100)
    batches = eval_batches(tokens, batch_size=4, seq_len=8, n_batches=2)
    assert len(batches) == 2
    x, y = batches[1]
    assert x.shape == (4, 8)
    np.testing.assert_array_equal(x[0], np.arange(32, 40))
    np.testing.assert_array_equal(y[0], np.arange(33, 41))
    with pytest.raises(CorpusTooSmallError):
        eval_batches(np.arange(5), 4, 8, 1)
