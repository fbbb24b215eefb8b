"""Discrete-event simulation of pipeline-parallel schedule execution.

The core models one-forward-one-backward (1F1B) execution: each microbatch's
forward walks the stages in order, its backward walks them in reverse, every
stage processes its units in the canonical 1F1B order (warmup forwards, then
alternating forward/backward, then drain), and at most S microbatches are in
flight. No-op slots occupy a forward+backward slot of their round's mean
microbatch duration but count as idle time.

Besides consuming a packed schedule, the module emulates two baselines on the
same samples: training each adapter's batches one at a time with a pipeline
flush per optimizer step, and round-robin filling with a fixed number of
samples per microbatch. A data-parallel mode reports step-time load imbalance
across ranks.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .costmodel import TimeModelParams, microbatch_time
from .errors import ValidationError
from .grouping import GroupingPlan, group_adapters
from .packing import Microbatch, MicrobatchSegment, SampleRef, SolverBudget, greedy_pack
from .schedule import (
    KIND_MICROBATCH,
    KIND_NOOP,
    Schedule,
    ScheduleEntry,
    check_bubble_lemma,
    verify_and_fix,
)
from .workload import AdapterSpec, SampleRecord, split_global_batches


class Policy(enum.Enum):
    """How microbatches are formed and ordered for the pipeline."""

    SEQUENTIAL_1F1B = "sequential_1f1b"
    UNIFORM_FILL = "uniform_fill"
    FUSED_SCHEDULE = "fused_schedule"


@dataclass(frozen=True)
class PipelineConfig:
    stage_count: int
    time_model: TimeModelParams
    backward_ratio: float = 2.0
    stage_multipliers: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.stage_count < 1:
            raise ValidationError(f"stage_count must be >= 1, got {self.stage_count}")
        if not self.backward_ratio > 0:
            raise ValidationError("backward_ratio must be > 0")
        if self.stage_multipliers is not None:
            if len(self.stage_multipliers) != self.stage_count:
                raise ValidationError(
                    f"need {self.stage_count} stage multipliers, got {len(self.stage_multipliers)}"
                )
            if any(not m > 0 for m in self.stage_multipliers):
                raise ValidationError("stage multipliers must be > 0")

    @property
    def multipliers(self) -> tuple[float, ...]:
        return self.stage_multipliers or (1.0,) * self.stage_count


@dataclass(frozen=True)
class TraceEvent:
    kind: str  # "forward" | "backward"
    unit: int
    stage: int
    start: float
    end: float
    is_noop: bool


@dataclass(frozen=True)
class SimResult:
    total_time: float
    stage_busy: tuple[float, ...]
    stage_idle: tuple[float, ...]
    bubble_ratio: float
    throughput_tokens_per_s: float
    tokens_processed: float
    rank_busy: tuple[float, ...] | None = None
    imbalance: float | None = None
    trace: tuple[TraceEvent, ...] | None = None

    def to_dict(self) -> dict:
        doc = {
            "total_time_s": self.total_time,
            "bubble_ratio": self.bubble_ratio,
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "tokens_processed": self.tokens_processed,
            "stages": [
                {"busy_s": b, "idle_s": i}
                for b, i in zip(self.stage_busy, self.stage_idle)
            ],
        }
        if self.rank_busy is not None:
            doc["rank_busy_s"] = list(self.rank_busy)
        if self.imbalance is not None:
            doc["imbalance"] = self.imbalance
        return doc


@dataclass(frozen=True)
class _Unit:
    forward_base: float
    is_real: bool
    raw_tokens: float


def _stage_order(stage: int, stage_count: int, n_units: int) -> list[tuple[str, int]]:
    """Canonical 1F1B unit order for one stage: warmup forwards, alternating
    steady pairs, then the backward drain."""
    warmup = min(n_units, stage_count - 1 - stage)
    order: list[tuple[str, int]] = [("forward", i) for i in range(warmup)]
    for i in range(n_units - warmup):
        order.append(("forward", warmup + i))
        order.append(("backward", i))
    for i in range(n_units - warmup, n_units):
        order.append(("backward", i))
    return order


def _simulate_units(units: Sequence[_Unit], config: PipelineConfig, record_trace: bool) -> SimResult:
    stages = config.stage_count
    mult = config.multipliers
    n = len(units)
    if n == 0:
        return SimResult(0.0, (0.0,) * stages, (0.0,) * stages, 0.0, 0.0, 0.0,
                         trace=() if record_trace else None)

    orders = [_stage_order(s, stages, n) for s in range(stages)]
    pointers = [0] * stages
    stage_clock = [0.0] * stages
    busy = [0.0] * stages
    f_end: list[list[float | None]] = [[None] * stages for _ in range(n)]
    b_end: list[list[float | None]] = [[None] * stages for _ in range(n)]
    trace: list[TraceEvent] = []

    remaining = stages * len(orders[0]) if stages else 0
    while remaining:
        progressed = False
        for s in range(stages):
            while pointers[s] < len(orders[s]):
                kind, i = orders[s][pointers[s]]
                if kind == "forward":
                    dep = 0.0 if s == 0 else f_end[i][s - 1]
                else:
                    dep = f_end[i][s] if s == stages - 1 else b_end[i][s + 1]
                if dep is None:
                    break
                duration = units[i].forward_base * mult[s]
                if kind == "backward":
                    duration *= config.backward_ratio
                start = max(stage_clock[s], dep)
                end = start + duration
                stage_clock[s] = end
                if kind == "forward":
                    f_end[i][s] = end
                else:
                    b_end[i][s] = end
                if units[i].is_real:
                    busy[s] += duration
                if record_trace:
                    trace.append(TraceEvent(kind, i, s, start, end, not units[i].is_real))
                pointers[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise RuntimeError("pipeline simulation made no progress; order is inconsistent")

    total = max(stage_clock)
    idle = tuple(total - b for b in busy)
    bubble = sum(idle) / (stages * total) if total > 0 else 0.0
    tokens = sum(u.raw_tokens for u in units if u.is_real)
    return SimResult(
        total_time=total,
        stage_busy=tuple(busy),
        stage_idle=idle,
        bubble_ratio=bubble,
        throughput_tokens_per_s=tokens / total if total > 0 else 0.0,
        tokens_processed=tokens,
        trace=tuple(trace) if record_trace else None,
    )


def _units_from_schedule(schedule: Schedule, tm: TimeModelParams) -> list[_Unit]:
    base_by_round: dict[int, list[float]] = {}
    for e in schedule.entries:
        if e.kind == KIND_MICROBATCH:
            base_by_round.setdefault(e.global_batch_index, []).append(
                microbatch_time(e.microbatch.total_padded_tokens, tm)
            )
    all_bases = [b for bases in base_by_round.values() for b in bases]
    overall_mean = sum(all_bases) / len(all_bases) if all_bases else 0.0

    units = []
    for e in schedule.entries:
        if e.kind == KIND_MICROBATCH:
            units.append(_Unit(
                microbatch_time(e.microbatch.total_padded_tokens, tm),
                True,
                e.microbatch.total_raw_tokens,
            ))
        else:
            bases = base_by_round.get(e.global_batch_index)
            noop_base = sum(bases) / len(bases) if bases else overall_mean
            units.append(_Unit(noop_base, False, 0.0))
    return units


def simulate_pipeline(
    schedule_or_tokens: Schedule | Sequence[float],
    config: PipelineConfig,
    record_trace: bool = False,
) -> SimResult:
    """Simulate 1F1B execution of a schedule or a plain microbatch stream.

    A Schedule input must already satisfy the commit-spacing rule for the
    configured stage count; a bare sequence is taken as per-microbatch token
    counts with no spacing constraints.
    """
    if isinstance(schedule_or_tokens, Schedule):
        violations = check_bubble_lemma(schedule_or_tokens, config.stage_count)
        if violations:
            v = violations[0]
            raise ValidationError(
                f"schedule violates commit spacing for stage_count={config.stage_count}: "
                f"adapter {v.adapter_id!r} batch {v.next_batch} commits at {v.commit_index}, "
                f"allowed from {v.required_index} (and {len(violations) - 1} more)"
            )
        units = _units_from_schedule(schedule_or_tokens, config.time_model)
    else:
        tokens = list(schedule_or_tokens)
        if any(t < 0 for t in tokens):
            raise ValidationError("token counts must be >= 0")
        units = [_Unit(microbatch_time(t, config.time_model), True, float(t)) for t in tokens]
    return _simulate_units(units, config, record_trace)


def simulate_rounds(rounds: Sequence[Sequence[float]], config: PipelineConfig) -> SimResult:
    """Simulate independent pipeline rounds (a full drain between rounds) and
    aggregate their timelines, as when each global batch runs as its own
    flush."""
    stages = config.stage_count
    total = 0.0
    busy = [0.0] * stages
    tokens = 0.0
    for tokens_in_round in rounds:
        if not tokens_in_round:
            continue
        result = simulate_pipeline(list(tokens_in_round), config)
        total += result.total_time
        tokens += result.tokens_processed
        for s in range(stages):
            busy[s] += result.stage_busy[s]
    idle = tuple(total - b for b in busy)
    bubble = sum(idle) / (stages * total) if total > 0 else 0.0
    return SimResult(
        total_time=total,
        stage_busy=tuple(busy),
        stage_idle=idle,
        bubble_ratio=bubble,
        throughput_tokens_per_s=tokens / total if total > 0 else 0.0,
        tokens_processed=tokens,
    )


def simulate_dp(
    streams: Sequence[Sequence[float]],
    config: PipelineConfig,
) -> SimResult:
    """Data-parallel mode: ranks synchronize each step, so a step costs the
    slowest rank's microbatch time. Imbalance is 1 - mean(busy)/max(busy)."""
    if not streams:
        raise ValidationError("need at least one rank stream")
    lengths = {len(s) for s in streams}
    if len(lengths) > 1:
        raise ValidationError(f"rank streams must align by step, got lengths {sorted(lengths)}")
    tm = config.time_model
    per_unit = 1.0 + config.backward_ratio
    rank_busy = [0.0] * len(streams)
    total = 0.0
    tokens = 0.0
    for step in range(next(iter(lengths))):
        step_times = []
        for r, stream in enumerate(streams):
            t = microbatch_time(stream[step], tm) * per_unit
            step_times.append(t)
            rank_busy[r] += t
            tokens += stream[step]
        total += max(step_times)
    max_busy = max(rank_busy)
    imbalance = 1.0 - (sum(rank_busy) / len(rank_busy)) / max_busy if max_busy > 0 else 0.0
    idle = tuple(total - b for b in rank_busy)
    bubble = sum(idle) / (len(streams) * total) if total > 0 else 0.0
    return SimResult(
        total_time=total,
        stage_busy=tuple(rank_busy),
        stage_idle=idle,
        bubble_ratio=bubble,
        throughput_tokens_per_s=tokens / total if total > 0 else 0.0,
        tokens_processed=tokens,
        rank_busy=tuple(rank_busy),
        imbalance=imbalance,
    )


def build_uniform_fill_schedule(
    specs: Sequence[AdapterSpec],
    samples_by_adapter: Mapping[str, Sequence[SampleRecord]],
    samples_per_microbatch: int,
    stage_count: int,
) -> Schedule:
    """Fixed-count microbatches, round-robin across adapters.

    Each adapter's global batches are chopped into chunks of a fixed sample
    count (token totals fall where they may), and adapters take turns
    contributing one chunk. Commit spacing is restored afterwards with no-op
    insertion.
    """
    if samples_per_microbatch < 1:
        raise ValidationError("samples_per_microbatch must be >= 1")
    queues: list[list[Microbatch]] = []
    for spec in specs:
        chunks: list[Microbatch] = []
        batches = split_global_batches(samples_by_adapter.get(spec.adapter_id, []))
        for j in sorted(batches):
            batch = batches[j]
            for start in range(0, len(batch), samples_per_microbatch):
                chunk = batch[start : start + samples_per_microbatch]
                seg = MicrobatchSegment(
                    adapter_id=spec.adapter_id,
                    global_batch_index=j,
                    samples=tuple(
                        SampleRef(s.sample_id, s.length_tokens)
                        for s in sorted(chunk, key=lambda s: s.sample_id)
                    ),
                    padding_multiple=spec.padding_multiple,
                )
                chunks.append(Microbatch(segments=(seg,), capacity=None))
        queues.append(chunks)

    entries: list[ScheduleEntry] = []
    cursors = [0] * len(queues)
    while any(c < len(q) for c, q in zip(cursors, queues)):
        for a, q in enumerate(queues):
            if cursors[a] < len(q):
                mb = q[cursors[a]]
                entries.append(
                    ScheduleEntry(KIND_MICROBATCH, mb, a, mb.segments[0].global_batch_index)
                )
                cursors[a] += 1
    raw = Schedule(tuple(entries), stage_count)
    return verify_and_fix(raw, stage_count)


def build_sequential_rounds(
    specs: Sequence[AdapterSpec],
    samples_by_adapter: Mapping[str, Sequence[SampleRecord]],
    capacity: int,
) -> list[list[float]]:
    """One adapter at a time, one pipeline flush per global batch, with
    greedy capacity packing inside each batch."""
    rounds: list[list[float]] = []
    for spec in specs:
        batches = split_global_batches(samples_by_adapter.get(spec.adapter_id, []))
        paddings = {spec.adapter_id: spec.padding_multiple}
        for j in sorted(batches):
            packed = greedy_pack(batches[j], capacity, paddings)
            rounds.append([mb.total_padded_tokens for mb in packed.microbatches])
    return rounds


def compare_policies(
    specs: Sequence[AdapterSpec],
    samples_by_adapter: Mapping[str, Sequence[SampleRecord]],
    config: PipelineConfig,
    policies: Sequence[Policy],
    *,
    capacity: int,
    budget: SolverBudget | None = None,
    group_size: int = 2,
    samples_per_microbatch: int = 4,
    workers: int = 1,
) -> dict[Policy, SimResult]:
    """Run each policy over the identical sample set and collect results."""
    from .planner import plan_schedule  # deferred: planner builds on this module's inputs

    results: dict[Policy, SimResult] = {}
    for policy in policies:
        if policy == Policy.FUSED_SCHEDULE:
            planned = plan_schedule(
                specs,
                samples_by_adapter,
                capacity=capacity,
                budget=budget or SolverBudget(),
                group_size=group_size,
                stage_count=config.stage_count,
                workers=workers,
            )
            results[policy] = simulate_pipeline(planned.schedule, config)
        elif policy == Policy.UNIFORM_FILL:
            schedule = build_uniform_fill_schedule(
                specs, samples_by_adapter, samples_per_microbatch, config.stage_count
            )
            results[policy] = simulate_pipeline(schedule, config)
        elif policy == Policy.SEQUENTIAL_1F1B:
            rounds = build_sequential_rounds(specs, samples_by_adapter, capacity)
            raw_rounds = _sequential_raw_tokens(specs, samples_by_adapter)
            result = simulate_rounds(rounds, config)
            # Padded tokens drive durations; throughput reports raw tokens.
            results[policy] = _with_raw_tokens(result, raw_rounds)
        else:
            raise ValidationError(f"unknown policy {policy!r}")
    return results


def _sequential_raw_tokens(specs, samples_by_adapter) -> float:
    return float(
        sum(s.length_tokens for spec in specs for s in samples_by_adapter.get(spec.adapter_id, []))
    )


def _with_raw_tokens(result: SimResult, raw_tokens: float) -> SimResult:
    return SimResult(
        total_time=result.total_time,
        stage_busy=result.stage_busy,
        stage_idle=result.stage_idle,
        bubble_ratio=result.bubble_ratio,
        throughput_tokens_per_s=raw_tokens / result.total_time if result.total_time > 0 else 0.0,
        tokens_processed=raw_tokens,
        rank_busy=result.rank_busy,
        imbalance=result.imbalance,
        trace=result.trace,
    )
