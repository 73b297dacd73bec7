import pytest

from hetloco import config
from hetloco.data import load_corpus
from hetloco.model import ModelConfig


@pytest.fixture
def tiny() -> ModelConfig:
    return ModelConfig(d_model=16, n_layers=4, n_heads=2, ffn_mult=2.0, vocab=256, seq_len=8, precision="float64", init_std=0.1)


@pytest.fixture
def tiny32(tiny) -> ModelConfig:
    return tiny.model_copy(update={"precision": "float32"})


@pytest.fixture(scope="session")
def small_corpus():
    return load_corpus(None, synthetic_bytes=30_000, seed=2)


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    path = tmp_path / "runs"
    monkeypatch.setattr(config, "RUNS_DATA_DIR", str(path))
    return path
