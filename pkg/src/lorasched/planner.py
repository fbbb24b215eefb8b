"""End-to-end schedule planning: stats, grouping, packing, assembly, repair."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import ValidationError
from .grouping import GroupingPlan, group_adapters
from .packing import PackingResult, SolverBudget, pack_all, padded_len
from .schedule import Schedule, build_schedule, check_bubble_lemma, merge_pass, verify_and_fix
from .workload import AdapterSpec, SampleRecord, compute_stats, split_global_batches


@dataclass(frozen=True)
class PlanResult:
    plan: GroupingPlan
    packings: dict[int, dict[int, PackingResult]]
    schedule: Schedule
    summary: dict


def plan_schedule(
    specs: Sequence[AdapterSpec],
    samples_by_adapter: Mapping[str, Sequence[SampleRecord]],
    *,
    capacity: int,
    budget: SolverBudget,
    group_size: int,
    stage_count: int,
    workers: int = 1,
) -> PlanResult:
    """Group adapters, pack every global batch, interleave, merge, repair.

    Samples must already carry global batch assignments. The returned
    schedule satisfies the commit-spacing rule for ``stage_count``.
    """
    if not specs:
        raise ValidationError("need at least one adapter")
    spec_by_id = {s.adapter_id: s for s in specs}
    if len(spec_by_id) != len(specs):
        raise ValidationError("duplicate adapter ids in run configuration")
    paddings = {s.adapter_id: s.padding_multiple for s in specs}

    max_single = 0
    for adapter_id, samples in samples_by_adapter.items():
        if adapter_id not in spec_by_id:
            raise ValidationError(f"samples reference unknown adapter {adapter_id!r}")
        for s in samples:
            max_single = max(max_single, padded_len(s.length_tokens, paddings[adapter_id]))
    if capacity < max_single:
        raise ValidationError(
            f"capacity {capacity} is below the largest single padded sample ({max_single})"
        )

    stats = [
        compute_stats(samples_by_adapter.get(s.adapter_id, []), s.adapter_id) for s in specs
    ]
    plan = group_adapters(stats, group_size=group_size)

    started = time.monotonic()
    packings: dict[int, dict[int, PackingResult]] = {}
    for group in plan.groups:
        merged: dict[int, list[SampleRecord]] = {}
        for adapter_id in group.adapter_ids:
            for j, batch in split_global_batches(samples_by_adapter.get(adapter_id, [])).items():
                merged.setdefault(j, []).extend(batch)
        if merged:
            missing = [j for j in range(max(merged) + 1) if j not in merged]
            if missing:
                raise ValidationError(
                    f"group {group.group_id} lacks samples for global batches {missing}"
                )
        packings[group.group_id] = pack_all(merged, capacity, paddings, budget, workers)
    packing_seconds = time.monotonic() - started

    raw_schedule = build_schedule(packings, plan, stage_count, capacity)
    merged_schedule = merge_pass(raw_schedule, capacity, stage_count)
    final = verify_and_fix(merged_schedule, stage_count)
    assert not check_bubble_lemma(final, stage_count)

    solver_hist: dict[str, int] = {}
    stage1_s = stage2_s = 0.0
    bins = 0
    for per_group in packings.values():
        for result in per_group.values():
            solver_hist[result.solver_used] = solver_hist.get(result.solver_used, 0) + 1
            stage1_s += result.stage1_seconds
            stage2_s += result.stage2_seconds
            bins += result.bin_count
    summary = {
        "adapter_count": len(specs),
        "sample_count": sum(len(v) for v in samples_by_adapter.values()),
        "raw_tokens": sum(s.length_tokens for v in samples_by_adapter.values() for s in v),
        "capacity": capacity,
        "stage_count": stage_count,
        "group_count": len(plan.groups),
        "bin_count_before_merge": bins,
        "entries": len(final.entries),
        "microbatches": final.microbatch_count,
        "noops": final.noop_count,
        "solver_used": dict(sorted(solver_hist.items())),
        "stage1_seconds": stage1_s,
        "stage2_seconds": stage2_s,
        "packing_seconds": packing_seconds,
        "adapter_stats": [
            {
                "adapter_id": st.adapter_id,
                "count": st.count,
                "mean_tokens": st.mean_tokens,
                "p50": st.p50,
                "p95": st.p95,
                "max_tokens": st.max_tokens,
            }
            for st in stats
        ],
    }
    return PlanResult(plan=plan, packings=packings, schedule=final, summary=summary)
