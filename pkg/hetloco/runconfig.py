"""Run-config files: one JSON document with model, optimizer, cluster, train and perf sections."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError
from .hetero import ClusterConfig, Preset, ReplicaSpec, Seeds, make_cluster
from .model import ModelConfig
from .perfmodel import DEFAULT_BANDWIDTHS, DEFAULT_RATIOS, SCENARIOS, HardwareSpec, LinkSpec, PerfScenario
from .sparseloco import AdamWConfig, OuterConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ClusterSection(_Section):
    """Either a preset (+ M, S, k/d, alpha) or an explicit replica list."""

    preset: Preset = "baseline"
    replicas: int = 4
    stages: int = 4
    k_over_d: float = 0.125
    alpha: Optional[float] = None
    specs: Optional[List[ReplicaSpec]] = None


class TrainSection(_Section):
    rounds: int = 60
    batch_size: int = 16
    eval_batches: int = 4
    embedding_adaptation: bool = True
    weight_projection: bool = False
    corpus: Optional[str] = None
    eval_fraction: float = 0.05
    synthetic_bytes: int = 400_000
    link_bps: float = 1e9


class CompareSection(_Section):
    scenario: str = "512m"
    bandwidth_bps: float = 1e9
    uncompressed_tokens: float = 10e9
    compressed_tokens: float = 12e9
    k_over_d: float = 0.125


class PerfSection(_Section):
    scenario: PerfScenario = Field(default_factory=PerfScenario)
    hardware: HardwareSpec = Field(default_factory=HardwareSpec)
    bandwidths: List[float] = Field(default_factory=lambda: list(DEFAULT_BANDWIDTHS))
    ratios: List[float] = Field(default_factory=lambda: list(DEFAULT_RATIOS))
    dp_bandwidth_bps: Optional[float] = None
    compare: CompareSection = Field(default_factory=CompareSection)


class RunConfig(_Section):
    model: ModelConfig = Field(default_factory=ModelConfig)
    inner: AdamWConfig = Field(default_factory=lambda: AdamWConfig(lr=3e-3, warmup_steps=50))
    outer: OuterConfig = Field(default_factory=OuterConfig)
    cluster: ClusterSection = Field(default_factory=ClusterSection)
    train: TrainSection = Field(default_factory=TrainSection)
    perf: PerfSection = Field(default_factory=PerfSection)
    seeds: Seeds = Field(default_factory=Seeds)
    out: Optional[str] = None

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.parse(raw, source=str(p))

    @classmethod
    def parse(cls, raw: Any, source: str = "<config>") -> "RunConfig":
        try:
            return cls.model_validate(raw)
        except ValidationError as exc:
            raise ConfigError(f"{source}: {describe_validation_error(exc)}") from exc

    def with_seed(self, seed: int) -> "RunConfig":
        """``--seed N``: model N, data N+1, basis N+2."""
        return self.model_copy(update={"seeds": Seeds(model=seed, data=seed + 1, basis=seed + 2)})

    def provenance(self) -> Dict[str, Any]:
        """Resolved config without the output location, so reruns elsewhere stay byte-identical."""
        return self.model_dump(mode="json", exclude={"out"}, by_alias=False)

    def to_cluster(self, **changes: Any) -> ClusterConfig:
        """Resolve the cluster section; ``changes`` override train/cluster fields (used by ablations)."""
        t = self.train.model_copy(update={k: v for k, v in changes.items() if k in TrainSection.model_fields})
        c = self.cluster.model_copy(update={k: v for k, v in changes.items() if k in ClusterSection.model_fields})
        shared = dict(
            model=self.model,
            inner=self.inner,
            seeds=self.seeds,
            rounds=t.rounds,
            batch_size=t.batch_size,
            eval_batches=t.eval_batches,
            embedding_adaptation=t.embedding_adaptation,
            weight_projection=t.weight_projection,
            hardware=self.perf.hardware,
            link=LinkSpec(bandwidth_bps=t.link_bps),
        )
        try:
            if c.specs is not None:
                outer = self.outer.model_copy(update={"replicas": len(c.specs)})
                return ClusterConfig(replicas=list(c.specs), outer=outer, **shared)
            return make_cluster(c.preset, c.replicas, c.stages, c.k_over_d, c.alpha, outer=self.outer, **shared)
        except ValidationError as exc:
            raise ConfigError(f"cluster: {describe_validation_error(exc)}") from exc

    def compare_scenario(self) -> PerfScenario:
        name = self.perf.compare.scenario
        if name not in SCENARIOS:
            raise ConfigError(f"perf.compare.scenario: unknown scenario {name!r}; known: {', '.join(SCENARIOS)}")
        return SCENARIOS[name]


def describe_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)
