"""Read-only FastAPI surface over stored runs and the perf model."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field, ValidationError

from . import perfmodel, storage
from .config import CORS_ORIGINS

app = FastAPI(title="hetloco API")

app.add_middleware(
    CORSMiddleware,
    allow_origins=CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)


class UtilizationRequest(BaseModel):
    """One perf-model evaluation at a single inter-stage bandwidth."""

    scenario: perfmodel.PerfScenario = Field(default_factory=perfmodel.PerfScenario)
    hardware: perfmodel.HardwareSpec = Field(default_factory=perfmodel.HardwareSpec)
    bandwidth_bps: float
    dp_bandwidth_bps: float | None = None


@app.get("/")
async def root():
    """Health check endpoint."""
    return {"status": "ok", "service": "hetloco", "version": storage.version_string()}


@app.get("/api/runs")
async def list_runs():
    """List stored runs (metadata only)."""
    return storage.list_runs()


@app.get("/api/runs/{run_id}")
async def get_run(run_id: str):
    record = storage.get_run(run_id)
    if record is None:
        raise HTTPException(status_code=404, detail="Run not found")
    return record


@app.post("/api/perf/utilization")
async def perf_utilization(request: UtilizationRequest):
    try:
        link = perfmodel.LinkSpec(bandwidth_bps=request.bandwidth_bps)
        dp_link = (
            perfmodel.LinkSpec(bandwidth_bps=request.dp_bandwidth_bps) if request.dp_bandwidth_bps is not None else None
        )
    except ValidationError as exc:
        detail = [{"loc": list(e["loc"]), "msg": e["msg"]} for e in exc.errors()]
        raise HTTPException(status_code=422, detail=detail) from exc
    s, hw = request.scenario, request.hardware
    return {
        "bandwidth_bps": request.bandwidth_bps,
        "k_over_d": s.k_over_d,
        "utilization": perfmodel.utilization(s, hw, link, dp_link),
        "step_compute_s": perfmodel.step_compute_time(s, hw),
        "pp_comm_s": perfmodel.pp_comm_time(s, link),
        "dp_comm_s": perfmodel.dp_comm_time(s, dp_link or link),
        "wallclock_s": perfmodel.wallclock(s, hw, link, s.total_steps, dp_link),
    }
