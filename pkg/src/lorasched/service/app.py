"""FastAPI service exposing the scheduling pipeline.

Stateless by design: every request carries its full workload (inline samples
or synthetic distribution specs) and every response returns complete
documents. The CLI is a thin client of these endpoints; the service never
touches the filesystem.
"""
from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import DatasetSource, RunConfig, distribution_from_dict
from ..costmodel import (
    GemmShape,
    HardwareProfile,
    TimeModelParams,
    arithmetic_intensity,
    down_projection_intensity,
    lora_memory_bytes,
    roundtrip_bytes,
    traffic,
)
from ..errors import (
    InfeasibleBinCountError,
    ParseError,
    SchedulerError,
    SolverError,
    UnpackableSampleError,
    ValidationError,
)
from ..packing import BatchPackingError
from ..runner import run_compare, run_generate, run_schedule, run_simulate, run_sweep
from ..workload import AdapterSpec, LengthComponent, LengthDistributionSpec, SampleRecord
from .models import (
    CompareRequest,
    GenerateRequest,
    HardwareModel,
    RunConfigModel,
    ScheduleRequest,
    SimulateRequest,
    SweepRequest,
    TimeModelModel,
    TrafficRequest,
)

SOLVER_ERRORS = (SolverError, InfeasibleBinCountError, UnpackableSampleError, BatchPackingError)

# Stands in for adapters whose samples arrive inline with the request, so the
# config still carries a well-formed (never sampled) source.
_INLINE_SOURCE = DatasetSource(
    distribution=LengthDistributionSpec(
        components=(LengthComponent(weight=1.0, location=1.0, scale=0.0, kind="normal"),),
        seed=0,
    ),
    count=0,
)


def _hardware(model: HardwareModel | None) -> HardwareProfile | None:
    if model is None:
        return None
    return HardwareProfile(
        peak_flops_half=model.peak_flops_half,
        mem_bandwidth=model.mem_bandwidth,
        machine_balance=model.machine_balance,
    )


def _time_model(model: TimeModelModel, hardware: HardwareProfile | None) -> TimeModelParams:
    return TimeModelParams(
        per_token_cost=model.per_token_cost,
        fixed_overhead=model.fixed_overhead,
        mode=model.mode,
        hardware=hardware if model.mode == "roofline" else None,
        num_layers=model.num_layers,
        hidden_size=model.hidden_size,
    )


def _config_from_model(model: RunConfigModel) -> tuple[RunConfig, dict[str, list[SampleRecord]]]:
    """Convert the request model to a core RunConfig plus inline samples."""
    adapters = []
    sources: dict[str, DatasetSource] = {}
    inline: dict[str, list[SampleRecord]] = {}
    for a in model.adapters:
        spec = AdapterSpec(
            adapter_id=a.adapter_id,
            global_batch_size=a.global_batch_size,
            padding_multiple=a.padding_multiple,
            lora_rank=a.lora_rank,
            alpha=a.alpha,
            dropout_p=a.dropout_p,
        )
        adapters.append(spec)
        if a.dataset is not None and a.dataset.samples is not None:
            inline[spec.adapter_id] = [
                SampleRecord(s.adapter_id, s.sample_id, s.length) for s in a.dataset.samples
            ]
            sources[spec.adapter_id] = _INLINE_SOURCE
        elif a.distribution is not None:
            sources[spec.adapter_id] = DatasetSource(
                distribution=distribution_from_dict(a.distribution.model_dump()),
                count=a.count,
            )
        elif a.dataset is not None and a.dataset.path is not None:
            raise ValidationError(
                f"adapter {a.adapter_id!r}: the service does not read files; "
                "send inline samples or a distribution"
            )
        else:
            raise ValidationError(f"adapter {a.adapter_id!r}: no dataset or distribution given")
    hardware = _hardware(model.hardware)
    config = RunConfig(
        adapters=tuple(adapters),
        sources=sources,
        capacity=model.capacity,
        capacity_candidates=tuple(model.capacity_candidates),
        stages=model.stages,
        timeout_s=model.timeout_s,
        node_limit=model.node_limit,
        group_size=model.group_size,
        workers=model.workers,
        seed=model.seed,
        samples_per_microbatch=model.samples_per_microbatch,
        backward_ratio=model.backward_ratio,
        stage_multipliers=tuple(model.stage_multipliers) if model.stage_multipliers else None,
        time_model=_time_model(model.time_model, hardware),
        hardware=hardware,
    )
    return config, inline


def create_app() -> FastAPI:
    app = FastAPI(
        title="multi-adapter microbatch scheduler",
        version=__version__,
        description=(
            "Schedules concurrent adapter fine-tuning jobs into capacity-bounded "
            "microbatches and simulates pipeline execution."
        ),
    )

    @app.exception_handler(SchedulerError)
    async def scheduler_error_handler(request: Request, exc: SchedulerError):
        if isinstance(exc, SOLVER_ERRORS):
            kind, status = "solver", 500
        elif isinstance(exc, ParseError):
            kind, status = "io", 400
        else:
            kind, status = "validation", 400
        return JSONResponse(
            status_code=status,
            content={"detail": {"kind": kind, "message": str(exc)}},
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.post("/v1/generate")
    def generate(req: GenerateRequest):
        config, _ = _config_from_model(req.config)
        return run_generate(config, req.adapter_ids)

    @app.post("/v1/schedule")
    def schedule(req: ScheduleRequest):
        config, inline = _config_from_model(req.config)
        doc, summary = run_schedule(config, inline_samples=inline or None)
        return {"schedule": doc, "summary": summary}

    @app.post("/v1/simulate")
    def simulate(req: SimulateRequest):
        hardware = _hardware(req.hardware)
        return run_simulate(
            req.schedule,
            _time_model(req.time_model, hardware),
            stages=req.stages,
            backward_ratio=req.backward_ratio,
            stage_multipliers=req.stage_multipliers,
            record_trace=req.record_trace,
        )

    @app.post("/v1/compare")
    def compare(req: CompareRequest):
        config, inline = _config_from_model(req.config)
        return run_compare(config, req.policies, inline_samples=inline or None)

    @app.post("/v1/sweep")
    def sweep(req: SweepRequest):
        config, _ = _config_from_model(req.config)
        return run_sweep(config, req.candidates, req.num_microbatches)

    @app.post("/v1/traffic")
    def traffic_report(req: TrafficRequest):
        shape = GemmShape(m=req.m, k=req.k, n=req.n, r=req.r, element_bytes=req.element_bytes)
        baseline = GemmShape(m=req.m, k=req.k, n=req.n, r=0, element_bytes=req.element_bytes)
        forward = traffic(shape, "forward", req.variant)
        backward = traffic(shape, "backward", req.variant)
        report = {
            "shape": {"m": req.m, "k": req.k, "n": req.n, "r": req.r,
                      "element_bytes": req.element_bytes},
            "variant": req.variant,
            "forward": forward.to_dict(),
            "backward": backward.to_dict(),
            "total_bytes": forward.total_bytes + backward.total_bytes,
            "baseline_total_bytes": roundtrip_bytes(baseline, req.variant),
        }
        if req.r:
            report["memory"] = lora_memory_bytes(req.n, req.k, req.r).to_dict()
            report["arithmetic_intensity"] = arithmetic_intensity(req.r, req.n, req.m)
            report["down_projection_intensity"] = down_projection_intensity(req.r, req.k, req.m)
        return report

    return app


app = create_app()
