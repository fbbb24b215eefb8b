"""Orchestration used by both the HTTP service and in-process callers."""
from __future__ import annotations

import time
from typing import Mapping, Sequence

from .config import RunConfig
from .costmodel import TimeModelParams, profile_capacity
from .errors import ValidationError
from .pipesim import (
    PipelineConfig,
    Policy,
    SimResult,
    compare_policies,
    simulate_pipeline,
)
from .planner import plan_schedule
from .schedule import Schedule, schedule_from_doc, schedule_to_doc
from .workload import (
    SampleRecord,
    assign_global_batches,
    load_samples,
    split_by_adapter,
    synthesize_dataset,
)

REPORT_SCHEMA_VERSION = 1


def build_workload(
    config: RunConfig,
    inline_samples: Mapping[str, Sequence[SampleRecord]] | None = None,
) -> dict[str, list[SampleRecord]]:
    """Materialize every adapter's dataset and assign global batches in
    dataset order. ``inline_samples`` (already-loaded records, e.g. shipped
    inside a service request) take precedence over the configured source."""
    out: dict[str, list[SampleRecord]] = {}
    for spec in config.adapters:
        if inline_samples is not None and spec.adapter_id in inline_samples:
            records = list(inline_samples[spec.adapter_id])
        else:
            source = config.sources[spec.adapter_id]
            if source.path is not None:
                records = [
                    s for s in load_samples(source.path, source.format)
                    if s.adapter_id == spec.adapter_id
                ]
            else:
                records = synthesize_dataset(
                    config.distribution_for(spec.adapter_id), source.count, spec.adapter_id
                )
        out[spec.adapter_id] = assign_global_batches(records, spec)
    return out


def pipeline_config(config: RunConfig) -> PipelineConfig:
    return PipelineConfig(
        stage_count=config.stages,
        time_model=config.time_model,
        backward_ratio=config.backward_ratio,
        stage_multipliers=config.stage_multipliers,
    )


def run_schedule(
    config: RunConfig,
    inline_samples: Mapping[str, Sequence[SampleRecord]] | None = None,
) -> tuple[dict, dict]:
    """Full scheduling pipeline; returns (schedule document, summary)."""
    if config.capacity is None:
        raise ValidationError("scheduling needs a concrete capacity; run a sweep first")
    started = time.monotonic()
    samples = build_workload(config, inline_samples)
    planned = plan_schedule(
        config.adapters,
        samples,
        capacity=config.capacity,
        budget=config.budget,
        group_size=config.group_size,
        stage_count=config.stages,
        workers=config.workers,
    )
    doc = schedule_to_doc(
        planned.schedule,
        adapters=config.adapters,
        extra={"seed": config.seed, "grouping": planned.plan.to_dict()},
    )
    summary = dict(planned.summary)
    summary["wall_seconds"] = time.monotonic() - started
    summary["seed"] = config.seed
    return doc, summary


def run_simulate(
    schedule_doc: Mapping,
    time_model: TimeModelParams,
    *,
    stages: int | None = None,
    backward_ratio: float = 2.0,
    stage_multipliers: Sequence[float] | None = None,
    record_trace: bool = False,
) -> dict:
    """Simulate a schedule document; stage count defaults to the document's."""
    schedule = schedule_from_doc(schedule_doc)
    config = PipelineConfig(
        stage_count=stages or schedule.stage_count,
        time_model=time_model,
        backward_ratio=backward_ratio,
        stage_multipliers=tuple(stage_multipliers) if stage_multipliers else None,
    )
    result = simulate_pipeline(schedule, config, record_trace=record_trace)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "mode": "schedule",
        "stage_count": config.stage_count,
        "result": result.to_dict(),
    }
    if record_trace:
        report["trace"] = [
            f"{e.kind} unit={e.unit} stage={e.stage} start={e.start:.9f} "
            f"end={e.end:.9f} noop={int(e.is_noop)}"
            for e in result.trace
        ]
    return report


def run_compare(
    config: RunConfig,
    policies: Sequence[str] | None = None,
    inline_samples: Mapping[str, Sequence[SampleRecord]] | None = None,
) -> dict:
    """Run the policy comparison over one shared workload."""
    if config.capacity is None:
        raise ValidationError("comparison needs a concrete capacity")
    chosen = [Policy(p) for p in policies] if policies else list(Policy)
    samples = build_workload(config, inline_samples)
    results = compare_policies(
        config.adapters,
        samples,
        pipeline_config(config),
        chosen,
        capacity=config.capacity,
        budget=config.budget,
        group_size=config.group_size,
        samples_per_microbatch=config.samples_per_microbatch,
        workers=config.workers,
    )
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "mode": "compare",
        "stage_count": config.stages,
        "adapter_count": len(config.adapters),
        "policies": {policy.value: res.to_dict() for policy, res in results.items()},
    }


def run_sweep(
    config: RunConfig,
    candidates: Sequence[int] | None = None,
    num_microbatches: int = 16,
) -> dict:
    """Profile candidate token capacities and pick the best-throughput one."""
    caps = list(candidates) if candidates else list(config.capacity_candidates)
    if not caps:
        raise ValidationError("no capacity candidates given")
    table = []
    cfg = pipeline_config(config)
    for cap in sorted(caps):
        result = simulate_pipeline([cap] * num_microbatches, cfg)
        table.append({
            "capacity": cap,
            "throughput_tokens_per_s": result.throughput_tokens_per_s,
            "bubble_ratio": result.bubble_ratio,
        })
    chosen = profile_capacity(
        caps, config.time_model, config.stages,
        backward_ratio=config.backward_ratio, num_microbatches=num_microbatches,
    )
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "mode": "sweep",
        "chosen_capacity": chosen,
        "candidates": table,
    }


def run_generate(config: RunConfig, adapter_ids: Sequence[str] | None = None) -> dict:
    """Synthesize datasets for the requested adapters (all synthetic ones by
    default) and return them as plain records."""
    wanted = set(adapter_ids) if adapter_ids else None
    datasets: dict[str, list[dict]] = {}
    for spec in config.adapters:
        if wanted is not None and spec.adapter_id not in wanted:
            continue
        source = config.sources[spec.adapter_id]
        if source.distribution is None:
            if wanted is not None:
                raise ValidationError(
                    f"adapter {spec.adapter_id!r} has a file source; nothing to generate"
                )
            continue
        records = synthesize_dataset(
            config.distribution_for(spec.adapter_id), source.count, spec.adapter_id
        )
        datasets[spec.adapter_id] = [
            {"adapter_id": r.adapter_id, "sample_id": r.sample_id, "length": r.length_tokens}
            for r in records
        ]
    return {"schema_version": REPORT_SCHEMA_VERSION, "mode": "generate", "datasets": datasets}
