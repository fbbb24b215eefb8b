import numpy as np
import pytest
from conftest import mixed_workload

from lorasched.costmodel import TimeModelParams
from lorasched.errors import ValidationError
from lorasched.packing import Microbatch, MicrobatchSegment, SampleRef, SolverBudget
from lorasched.pipesim import (
    PipelineConfig,
    Policy,
    build_uniform_fill_schedule,
    compare_policies,
    simulate_dp,
    simulate_pipeline,
    simulate_rounds,
)
from lorasched.planner import plan_schedule
from lorasched.schedule import KIND_MICROBATCH, Schedule, ScheduleEntry

TM = TimeModelParams(per_token_cost=1e-6, fixed_overhead=0.0)


def config(S, ratio=2.0, tm=TM, mult=None):
    return PipelineConfig(stage_count=S, time_model=tm, backward_ratio=ratio,
                          stage_multipliers=mult)


class TestUniform1F1B:
    def test_single_stage_no_bubbles(self):
        res = simulate_pipeline([512] * 6, config(1))
        assert res.bubble_ratio == 0.0

    def test_closed_form_s4_m8(self):
        res = simulate_pipeline([1024] * 8, config(4))
        assert res.bubble_ratio == pytest.approx(3 / 11, abs=1e-9)

    def test_closed_form_grid(self):
        for S in range(1, 9):
            for M in range(1, 65):
                res = simulate_pipeline([256] * M, config(S))
                assert res.bubble_ratio == pytest.approx(
                    (S - 1) / (M + S - 1), abs=1e-9
                ), (S, M)

    def test_bubble_vanishes_with_more_microbatches(self):
        ratios = [
            simulate_pipeline([128] * M, config(4)).bubble_ratio
            for M in (1, 2, 4, 8, 16, 32, 64, 128)
        ]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_work_conservation(self):
        tm = TimeModelParams(per_token_cost=1e-6, fixed_overhead=1e-4)
        tokens = [100, 2000, 50, 700, 1500, 900]
        res = simulate_pipeline(tokens, config(4, tm=tm))
        per_stage = sum((1e-4 + 1e-6 * t) * 3.0 for t in tokens)
        for busy in res.stage_busy:
            assert busy == pytest.approx(per_stage, rel=1e-12)

    def test_causality_from_trace(self):
        res = simulate_pipeline([100, 900, 300, 50, 1200], config(4), record_trace=True)
        f_end = {}
        b_end = {}
        for e in res.trace:
            (f_end if e.kind == "forward" else b_end)[(e.unit, e.stage)] = e.end
        for e in res.trace:
            if e.kind == "forward" and e.stage > 0:
                assert e.start >= f_end[(e.unit, e.stage - 1)] - 1e-12
            if e.kind == "backward":
                if e.stage == 3:
                    assert e.start >= f_end[(e.unit, 3)] - 1e-12
                else:
                    assert e.start >= b_end[(e.unit, e.stage + 1)] - 1e-12

    def test_deterministic_trace(self):
        a = simulate_pipeline([100, 900, 300], config(3), record_trace=True)
        b = simulate_pipeline([100, 900, 300], config(3), record_trace=True)
        assert a.trace == b.trace

    def test_stage_multipliers_slow_last_stage(self):
        balanced = simulate_pipeline([512] * 8, config(4))
        skewed = simulate_pipeline([512] * 8, config(4, mult=(1.0, 1.0, 1.0, 1.5)))
        assert skewed.total_time > balanced.total_time
        assert skewed.bubble_ratio > balanced.bubble_ratio

    def test_empty_stream(self):
        res = simulate_pipeline([], config(4))
        assert res.total_time == 0.0
        assert res.bubble_ratio == 0.0


class TestScheduleMode:
    def _schedule(self, S=4):
        specs, samples = mixed_workload(2, samples_per_adapter=32)
        planned = plan_schedule(
            specs, samples, capacity=4096, budget=SolverBudget(timeout_s=0.05),
            group_size=2, stage_count=S,
        )
        return planned.schedule

    def test_schedule_simulation_counts_raw_tokens(self):
        sched = self._schedule()
        res = simulate_pipeline(sched, config(4))
        raw = sum(
            e.microbatch.total_raw_tokens
            for e in sched.entries
            if e.microbatch is not None
        )
        assert res.tokens_processed == raw

    def test_violating_schedule_rejected(self):
        seg = MicrobatchSegment("x", 0, (SampleRef("s0", 10),), 1)
        seg2 = MicrobatchSegment("x", 1, (SampleRef("s1", 10),), 1)
        entries = (
            ScheduleEntry(KIND_MICROBATCH, Microbatch((seg,), None), 0, 0),
            ScheduleEntry(KIND_MICROBATCH, Microbatch((seg2,), None), 0, 1),
        )
        sched = Schedule(entries, 4)
        with pytest.raises(ValidationError, match="spacing"):
            simulate_pipeline(sched, config(4))

    def test_noops_count_as_idle(self):
        # One adapter, two batches of one microbatch each: repair inserts
        # S-1 noops, so the bubble ratio must reflect them as idle time.
        from lorasched.schedule import verify_and_fix

        seg = MicrobatchSegment("x", 0, (SampleRef("s0", 1000),), 1)
        seg2 = MicrobatchSegment("x", 1, (SampleRef("s1", 1000),), 1)
        entries = (
            ScheduleEntry(KIND_MICROBATCH, Microbatch((seg,), None), 0, 0),
            ScheduleEntry(KIND_MICROBATCH, Microbatch((seg2,), None), 0, 1),
        )
        fixed = verify_and_fix(Schedule(entries, 4), 4)
        # Positions 0 and 1 must become 0 and 3: two noops suffice.
        assert fixed.noop_count == 2
        res = simulate_pipeline(fixed, config(4))
        # 4 uniform slots (2 real), total (4+3) slots of work time: busy
        # fraction 6/21 per stage.
        assert res.bubble_ratio == pytest.approx(1 - 6 / 21, abs=1e-9)


class TestSimulateDP:
    def test_identical_streams_balanced(self):
        res = simulate_dp([[1000, 500], [1000, 500]], config(1))
        assert res.imbalance == pytest.approx(0.0)

    def test_two_rank_imbalance(self):
        res = simulate_dp([[1000], [2000]], config(1))
        assert res.imbalance == pytest.approx(0.25)

    def test_single_rank(self):
        res = simulate_dp([[123, 456]], config(1))
        assert res.imbalance == pytest.approx(0.0)

    def test_mismatched_streams_rejected(self):
        with pytest.raises(ValidationError, match="align"):
            simulate_dp([[1], [1, 2]], config(1))

    def test_step_time_is_max_over_ranks(self):
        res = simulate_dp([[1000], [2000]], config(1))
        assert res.total_time == pytest.approx((1e-6 * 2000) * 3)


class TestPolicies:
    def test_uniform_fill_round_robins_adapters(self):
        specs, samples = mixed_workload(3, samples_per_adapter=16)
        sched = build_uniform_fill_schedule(specs, samples, 4, stage_count=2)
        adapters = [
            e.microbatch.segments[0].adapter_id
            for e in sched.entries
            if e.kind == KIND_MICROBATCH
        ][:3]
        assert adapters == ["a0", "a1", "a2"]

    def test_compare_multi_adapter_ordering(self):
        specs, samples = mixed_workload(4, samples_per_adapter=64)
        results = compare_policies(
            specs, samples, config(4, tm=TimeModelParams(1e-6, 2e-4)),
            list(Policy), capacity=4096, budget=SolverBudget(timeout_s=0.05),
        )
        fused = results[Policy.FUSED_SCHEDULE].bubble_ratio
        uniform = results[Policy.UNIFORM_FILL].bubble_ratio
        sequential = results[Policy.SEQUENTIAL_1F1B].bubble_ratio
        assert fused < uniform < sequential

    def test_single_adapter_fused_close_to_sequential(self):
        specs, samples = mixed_workload(1, samples_per_adapter=64)
        results = compare_policies(
            specs, samples, config(4, tm=TimeModelParams(1e-6, 2e-4)),
            [Policy.FUSED_SCHEDULE, Policy.SEQUENTIAL_1F1B],
            capacity=4096, budget=SolverBudget(timeout_s=0.05),
        )
        fused = results[Policy.FUSED_SCHEDULE].bubble_ratio
        seq = results[Policy.SEQUENTIAL_1F1B].bubble_ratio
        assert abs(fused - seq) / seq <= 0.10

    def test_same_tokens_processed_across_policies(self):
        specs, samples = mixed_workload(3, samples_per_adapter=32)
        results = compare_policies(
            specs, samples, config(4), list(Policy),
            capacity=4096, budget=SolverBudget(timeout_s=0.05),
        )
        tokens = {round(r.tokens_processed) for r in results.values()}
        assert len(tokens) == 1


class TestSimulateRounds:
    def test_rounds_accumulate(self):
        one = simulate_pipeline([512] * 4, config(4))
        two = simulate_rounds([[512] * 4, [512] * 4], config(4))
        assert two.total_time == pytest.approx(2 * one.total_time)
        assert two.bubble_ratio == pytest.approx(one.bubble_ratio)
