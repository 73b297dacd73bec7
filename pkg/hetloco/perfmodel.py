"""Analytic compute/bandwidth model for pipeline- and data-parallel training.

Serial cost model: a step costs its compute time plus the exposed share
(1 - overlap) of its pipeline traffic and its amortized DP traffic. Pure
functions only; every number is a closed-form expression of the scenario.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError

DEFAULT_BANDWIDTHS = (1e8, 2e8, 5e8, 1e9, 2e9, 5e9, 1e10, 1e11)
DEFAULT_RATIOS = (1.0, 0.25, 0.125, 1 / 32)


class HardwareSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    peak_flops: float = 2.5e13
    mfu: float = 0.4

    @model_validator(mode="after")
    def _check(self) -> "HardwareSpec":
        if not self.peak_flops > 0:
            raise ValueError("peak_flops must be positive")
        if not 0 < self.mfu <= 1:
            raise ValueError("mfu must be in (0, 1]")
        return self


class LinkSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    bandwidth_bps: float
    latency_s: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "LinkSpec":
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_s < 0:
            raise ValueError("latency must be >= 0")
        return self


class PerfScenario(BaseModel):
    """Defaults describe a 70B model over 4 stages, H=50, 524,288 tokens per inner step."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    param_count: float = 70e9
    d_model: int = 8192
    seq_len: int = 2048
    micro_batch: int = 1
    microbatches: int | None = None
    stages: int = 4
    k_over_d: float = 0.125
    inner_steps: int = 50
    dp_density: float = 0.0078125
    act_bytes: int = 2
    dp_value_bytes: int = 4
    dp_index_bytes: int = 2
    dp_reduce_factor: float = 2.0
    tokens_per_step: int = 524_288
    total_tokens: float = 10e9
    overlap: float = Field(0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self) -> "PerfScenario":
        positive = {
            "param_count": self.param_count,
            "d_model": self.d_model,
            "seq_len": self.seq_len,
            "micro_batch": self.micro_batch,
            "stages": self.stages,
            "inner_steps": self.inner_steps,
            "act_bytes": self.act_bytes,
            "tokens_per_step": self.tokens_per_step,
        }
        bad = [k for k, v in positive.items() if not v > 0]
        if bad:
            raise ValueError(f"must be positive: {', '.join(bad)}")
        if not 0 < self.k_over_d <= 1:
            raise ValueError("k_over_d must be in (0, 1]")
        if not 0 <= self.dp_density <= 1:
            raise ValueError("dp_density must be in [0, 1]")
        if self.microbatches is not None and self.microbatches < 1:
            raise ValueError("microbatches must be >= 1")
        if self.total_tokens < 0:
            raise ValueError("total_tokens must be >= 0")
        return self

    @property
    def n_microbatches(self) -> int:
        if self.microbatches is not None:
            return self.microbatches
        return max(1, self.tokens_per_step // (self.micro_batch * self.seq_len))

    @property
    def total_steps(self) -> int:
        return math.ceil(self.total_tokens / self.tokens_per_step)


SCENARIOS: dict[str, PerfScenario] = {
    "70b": PerfScenario(),
    "512m": PerfScenario(param_count=512e6, d_model=1536),
}


class SweepRow(BaseModel):
    bandwidth_bps: float
    k_over_d: float
    utilization: float
    wallclock_s: float


class WallclockComparison(BaseModel):
    bandwidth_bps: float
    uncompressed_tokens: float
    compressed_tokens: float
    k_over_d: float
    uncompressed_s: float
    compressed_s: float

    @property
    def speedup(self) -> float:
        return self.uncompressed_s / self.compressed_s if self.compressed_s else math.inf


def step_compute_time(s: PerfScenario, hw: HardwareSpec) -> float:
    """6·N·tokens / (peak·mfu)"""
    return 6.0 * s.param_count * s.tokens_per_step / (hw.peak_flops * hw.mfu)


def pp_bytes_per_step(s: PerfScenario) -> float:
    """Forward activations and backward gradients across every stage boundary."""
    width = s.d_model * s.k_over_d
    return 2 * (s.stages - 1) * s.n_microbatches * s.micro_batch * s.seq_len * width * s.act_bytes


def pp_comm_time(s: PerfScenario, link: LinkSpec) -> float:
    messages = 2 * (s.stages - 1) * s.n_microbatches
    return pp_bytes_per_step(s) * 8.0 / link.bandwidth_bps + messages * link.latency_s


def dp_bytes_per_round(s: PerfScenario) -> float:
    return s.param_count * s.dp_density * (s.dp_value_bytes + s.dp_index_bytes) * s.dp_reduce_factor


def dp_comm_time(s: PerfScenario, link: LinkSpec) -> float:
    """Seconds per outer round (send the sparse delta, receive the average)."""
    if s.dp_density == 0:
        return 0.0
    return dp_bytes_per_round(s) * 8.0 / link.bandwidth_bps + 2 * link.latency_s


def _step_time(s: PerfScenario, hw: HardwareSpec, link: LinkSpec, dp_link: LinkSpec | None) -> tuple[float, float]:
    t_c = step_compute_time(s, hw)
    exposed = (1.0 - s.overlap) * (pp_comm_time(s, link) + dp_comm_time(s, dp_link or link) / s.inner_steps)
    return t_c, exposed


def utilization(s: PerfScenario, hw: HardwareSpec, link: LinkSpec, dp_link: LinkSpec | None = None) -> float:
    t_c, exposed = _step_time(s, hw, link, dp_link)
    return t_c / (t_c + exposed)


def wallclock(
    s: PerfScenario, hw: HardwareSpec, link: LinkSpec, total_steps: int, dp_link: LinkSpec | None = None
) -> float:
    if total_steps < 0:
        raise ConfigError("total_steps must be >= 0")
    t_c, exposed = _step_time(s, hw, link, dp_link)
    return total_steps * (t_c + exposed)


def sweep(
    scenarios: Sequence[PerfScenario],
    bandwidths: Iterable[float],
    hw: HardwareSpec,
    dp_link: LinkSpec | None = None,
) -> list[SweepRow]:
    """Utilization for every (scenario, bandwidth); the DP link follows the swept link unless fixed."""
    grid = sorted(float(b) for b in bandwidths)
    if not grid or not scenarios:
        raise ConfigError("sweep needs at least one bandwidth and one scenario")
    if any(b <= 0 for b in grid):
        raise ConfigError("bandwidths must be positive")
    rows = []
    for s in scenarios:
        for bw in grid:
            link = LinkSpec(bandwidth_bps=bw)
            rows.append(
                SweepRow(
                    bandwidth_bps=bw,
                    k_over_d=s.k_over_d,
                    utilization=utilization(s, hw, link, dp_link),
                    wallclock_s=wallclock(s, hw, link, s.total_steps, dp_link),
                )
            )
    return rows


def ratio_family(base: PerfScenario, ratios: Iterable[float] = DEFAULT_RATIOS) -> list[PerfScenario]:
    return [base.model_copy(update={"k_over_d": float(r)}) for r in ratios]


def compare_wallclock(
    base: PerfScenario,
    hw: HardwareSpec,
    link: LinkSpec,
    uncompressed_tokens: float = 10e9,
    compressed_tokens: float = 12e9,
    k_over_d: float = 0.125,
    dp_link: LinkSpec | None = None,
) -> WallclockComparison:
    """Uncompressed run at its token budget against a compressed run given extra tokens."""
    plain = base.model_copy(update={"k_over_d": 1.0, "total_tokens": uncompressed_tokens})
    packed = base.model_copy(update={"k_over_d": k_over_d, "total_tokens": compressed_tokens})
    return WallclockComparison(
        bandwidth_bps=link.bandwidth_bps,
        uncompressed_tokens=uncompressed_tokens,
        compressed_tokens=compressed_tokens,
        k_over_d=k_over_d,
        uncompressed_s=wallclock(plain, hw, link, plain.total_steps, dp_link),
        compressed_s=wallclock(packed, hw, link, packed.total_steps, dp_link),
    )


def round_wallclock(
    param_count: float,
    tokens_per_step: int,
    inner_steps: int,
    pp_bytes: float,
    dp_bytes: float,
    hw: HardwareSpec,
    link: LinkSpec,
    dp_link: LinkSpec | None = None,
    dp_reduce_factor: float = 2.0,
) -> float:
    """Estimated seconds for one outer round given bytes metered on the slowest replica."""
    t_c = inner_steps * 6.0 * param_count * tokens_per_step / (hw.peak_flops * hw.mfu)
    dp = dp_link or link
    return t_c + pp_bytes * 8.0 / link.bandwidth_bps + dp_bytes * dp_reduce_factor * 8.0 / dp.bandwidth_bps
