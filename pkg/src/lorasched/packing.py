"""Capacity-bounded microbatch packing for one global batch.

Three layers: a first-fit-decreasing greedy baseline, an exact two-stage
branch-and-bound solver (minimize bin count, then minimize the smallest bin's
padded tokens at that count), and the fallback comparison that picks between
them. Per-batch solves are independent, deterministic, and can run in a
process pool.

Token accounting follows the padding rule throughout: within one microbatch,
each adapter's raw tokens are rounded up to that adapter's padding multiple,
and the sum of padded segments must stay within the capacity.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import (
    InfeasibleBinCountError,
    SchedulerError,
    SolverError,
    UnpackableSampleError,
    ValidationError,
)
from .workload import SampleRecord


def padded_len(raw_tokens: int, padding_multiple: int) -> int:
    """Least multiple of the padding that covers ``raw_tokens``."""
    return -(-raw_tokens // padding_multiple) * padding_multiple


@dataclass(frozen=True)
class SampleRef:
    sample_id: str
    length_tokens: int


@dataclass(frozen=True)
class MicrobatchSegment:
    """All samples of one (adapter, global batch) inside one microbatch."""

    adapter_id: str
    global_batch_index: int
    samples: tuple[SampleRef, ...]
    padding_multiple: int

    @property
    def raw_tokens(self) -> int:
        return sum(s.length_tokens for s in self.samples)

    @property
    def padded_tokens(self) -> int:
        return padded_len(self.raw_tokens, self.padding_multiple)

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return tuple(s.sample_id for s in self.samples)


@dataclass(frozen=True)
class Microbatch:
    """One capacity-bounded bin of padded per-adapter token segments.

    ``capacity`` is None for streams built outside the packing path (for
    example the fixed-sample baseline emulation), which are not capacity
    bounded.
    """

    segments: tuple[MicrobatchSegment, ...]
    capacity: int | None

    def __post_init__(self):
        seen: set[str] = set()
        for seg in self.segments:
            for ref in seg.samples:
                if ref.sample_id in seen:
                    raise ValidationError(f"sample {ref.sample_id!r} appears twice in microbatch")
                seen.add(ref.sample_id)
        if self.capacity is not None and self.total_padded_tokens > self.capacity:
            raise ValidationError(
                f"microbatch holds {self.total_padded_tokens} padded tokens, "
                f"capacity is {self.capacity}"
            )

    @property
    def total_padded_tokens(self) -> int:
        return sum(seg.padded_tokens for seg in self.segments)

    @property
    def total_raw_tokens(self) -> int:
        return sum(seg.raw_tokens for seg in self.segments)

    @property
    def sample_count(self) -> int:
        return sum(len(seg.samples) for seg in self.segments)


@dataclass(frozen=True)
class PackingResult:
    """Packing of one global batch plus solver diagnostics."""

    microbatches: tuple[Microbatch, ...]
    solver_used: str  # greedy | milp | milp_stage1_greedy_stage2
    stage1_optimal: bool
    stage2_optimal: bool
    stage1_seconds: float = 0.0
    stage2_seconds: float = 0.0
    greedy_bins: int = 0
    greedy_smallest: int = 0
    stage1_bins: int | None = None
    stage2_smallest: int | None = None

    @property
    def bin_count(self) -> int:
        return len(self.microbatches)

    @property
    def smallest_bin_tokens(self) -> int:
        if not self.microbatches:
            return 0
        return min(mb.total_padded_tokens for mb in self.microbatches)


@dataclass(frozen=True)
class SolverBudget:
    """Per-stage, per-batch search budget.

    The wall-clock timeout matches how long a stage may run; the optional
    node limit caps explored search nodes instead, which is the knob to use
    when bit-identical results across machines matter more than latency.
    """

    timeout_s: float = 10.0
    node_limit: int | None = None

    def __post_init__(self):
        if not self.timeout_s > 0:
            raise ValidationError(f"timeout must be > 0, got {self.timeout_s}")
        if self.node_limit is not None and self.node_limit < 1:
            raise ValidationError("node_limit must be >= 1 when set")


class _BudgetClock:
    __slots__ = ("deadline", "node_limit", "nodes")

    def __init__(self, budget: SolverBudget):
        self.deadline = time.monotonic() + budget.timeout_s
        self.node_limit = budget.node_limit
        self.nodes = 0

    def tick(self) -> bool:
        """Account one node; True when the budget is exhausted."""
        self.nodes += 1
        if self.node_limit is not None and self.nodes > self.node_limit:
            return True
        return time.monotonic() >= self.deadline


class _BudgetExpired(Exception):
    pass


class BatchPackingError(SchedulerError):
    """Error from packing one global batch, tagged with its index."""

    def __init__(self, batch_index: int, message: str):
        self.batch_index = batch_index
        super().__init__(f"global batch {batch_index}: {message}")


def _check_packable(items: Sequence[SampleRecord], capacity: int, paddings: Mapping[str, int]) -> None:
    for s in items:
        if s.adapter_id not in paddings:
            raise ValidationError(f"no padding multiple known for adapter {s.adapter_id!r}")
        single = padded_len(s.length_tokens, paddings[s.adapter_id])
        if single > capacity:
            raise UnpackableSampleError(s.adapter_id, s.sample_id, single, capacity)


def _sorted_items(samples: Sequence[SampleRecord]) -> list[SampleRecord]:
    # Descending length; ties by adapter then sample id for determinism.
    return sorted(samples, key=lambda s: (-s.length_tokens, s.adapter_id, s.sample_id))


class _BinState:
    """Mutable bins during search: adapter raw sums plus padded/raw totals."""

    __slots__ = ("raws", "totals", "raw_totals", "paddings")

    def __init__(self, paddings: Mapping[str, int]):
        self.raws: list[dict[str, int]] = []
        self.totals: list[int] = []
        self.raw_totals: list[int] = []
        self.paddings = paddings

    def open_bin(self) -> int:
        self.raws.append({})
        self.totals.append(0)
        self.raw_totals.append(0)
        return len(self.raws) - 1

    def close_last(self) -> None:
        self.raws.pop()
        self.totals.pop()
        self.raw_totals.pop()

    def new_total(self, b: int, sample: SampleRecord) -> int:
        p = self.paddings[sample.adapter_id]
        raw = self.raws[b].get(sample.adapter_id, 0)
        old = padded_len(raw, p) if raw else 0
        return self.totals[b] - old + padded_len(raw + sample.length_tokens, p)

    def place(self, b: int, sample: SampleRecord) -> None:
        self.totals[b] = self.new_total(b, sample)
        self.raw_totals[b] += sample.length_tokens
        self.raws[b][sample.adapter_id] = self.raws[b].get(sample.adapter_id, 0) + sample.length_tokens

    def unplace(self, b: int, sample: SampleRecord) -> None:
        p = self.paddings[sample.adapter_id]
        raw = self.raws[b][sample.adapter_id]
        new_raw = raw - sample.length_tokens
        old = padded_len(raw, p)
        new = padded_len(new_raw, p) if new_raw else 0
        self.totals[b] += new - old
        self.raw_totals[b] -= sample.length_tokens
        if new_raw:
            self.raws[b][sample.adapter_id] = new_raw
        else:
            del self.raws[b][sample.adapter_id]

    def signature(self, b: int) -> tuple:
        return tuple(sorted(self.raws[b].items()))


def _build_microbatches(
    items: Sequence[SampleRecord],
    assignment: Sequence[int],
    paddings: Mapping[str, int],
    capacity: int,
    n_bins: int,
) -> tuple[Microbatch, ...]:
    grouped: list[dict[tuple[str, int], list[SampleRef]]] = [dict() for _ in range(n_bins)]
    for item, b in zip(items, assignment):
        key = (item.adapter_id, item.global_batch_index)
        grouped[b].setdefault(key, []).append(SampleRef(item.sample_id, item.length_tokens))
    out = []
    for bucket in grouped:
        segments = tuple(
            MicrobatchSegment(
                adapter_id=a,
                global_batch_index=j,
                samples=tuple(sorted(refs, key=lambda r: r.sample_id)),
                padding_multiple=paddings[a],
            )
            for (a, j), refs in sorted(bucket.items())
        )
        out.append(Microbatch(segments=segments, capacity=capacity))
    return tuple(out)


def _adapter_demand_lower_bound(
    items: Sequence[SampleRecord], capacity: int, paddings: Mapping[str, int]
) -> int:
    """ceil of the minimal possible padded volume over the capacity.

    Merging all of an adapter's tokens into one segment gives its smallest
    achievable padded contribution; splitting across bins only adds padding.
    """
    per_adapter: dict[str, int] = {}
    for s in items:
        per_adapter[s.adapter_id] = per_adapter.get(s.adapter_id, 0) + s.length_tokens
    volume = sum(padded_len(raw, paddings[a]) for a, raw in per_adapter.items())
    return -(-volume // capacity)


def _empty_result(solver_used: str = "greedy") -> PackingResult:
    return PackingResult(
        microbatches=(),
        solver_used=solver_used,
        stage1_optimal=True,
        stage2_optimal=True,
    )


def greedy_pack(
    samples: Sequence[SampleRecord], capacity: int, paddings: Mapping[str, int]
) -> PackingResult:
    """First-fit-decreasing: sort by descending length, fill the first bin
    whose padded total stays within capacity, open a new bin otherwise."""
    if capacity < 1:
        raise ValidationError(f"capacity must be >= 1, got {capacity}")
    if not samples:
        return _empty_result()
    _check_packable(samples, capacity, paddings)
    items = _sorted_items(samples)
    bins = _BinState(paddings)
    assignment = []
    for item in items:
        for b in range(len(bins.totals)):
            if bins.new_total(b, item) <= capacity:
                bins.place(b, item)
                assignment.append(b)
                break
        else:
            b = bins.open_bin()
            bins.place(b, item)
            assignment.append(b)
    microbatches = _build_microbatches(items, assignment, paddings, capacity, len(bins.totals))
    smallest = min(mb.total_padded_tokens for mb in microbatches)
    return PackingResult(
        microbatches=microbatches,
        solver_used="greedy",
        stage1_optimal=False,
        stage2_optimal=False,
        greedy_bins=len(microbatches),
        greedy_smallest=smallest,
    )


@dataclass
class _StageOutcome:
    assignment: list[int] | None
    objective: int | None
    optimal: bool
    improved: bool
    seconds: float
    nodes: int


def _search_min_bins(
    items: Sequence[SampleRecord],
    capacity: int,
    paddings: Mapping[str, int],
    upper_assignment: Sequence[int],
    upper_bins: int,
    budget: SolverBudget,
) -> _StageOutcome:
    """Depth-first branch and bound for the minimum bin count.

    Bins are used in contiguous prefix order (sample i can open at most one
    new bin), identical bins are branched only once, and branches that cannot
    beat the incumbent are cut by a raw-volume bound.
    """
    started = time.monotonic()
    clock = _BudgetClock(budget)
    lower = _adapter_demand_lower_bound(items, capacity, paddings)
    best_assignment = list(upper_assignment)
    best_bins = upper_bins
    if best_bins <= lower:
        return _StageOutcome(best_assignment, best_bins, True, False, time.monotonic() - started, 0)

    bins = _BinState(paddings)
    current: list[int] = []
    suffix_raw = [0] * (len(items) + 1)
    for i in range(len(items) - 1, -1, -1):
        suffix_raw[i] = suffix_raw[i + 1] + items[i].length_tokens
    state = {"best_bins": best_bins, "best_assignment": best_assignment, "improved": False}

    def recurse(i: int) -> None:
        if clock.tick():
            raise _BudgetExpired
        if i == len(items):
            used = len(bins.totals)
            if used < state["best_bins"]:
                state["best_bins"] = used
                state["best_assignment"] = list(current)
                state["improved"] = True
            return
        used = len(bins.totals)
        # Remaining raw tokens must fit in the raw headroom of open bins plus
        # the bins we may still open while beating the incumbent. Raw sums,
        # not padded ones: padding slack can absorb raw tokens for free.
        raw_slack = used * capacity - sum(bins.raw_totals)
        if suffix_raw[i] > raw_slack + (state["best_bins"] - 1 - used) * capacity:
            return
        item = items[i]
        tried: set[tuple] = set()
        for b in range(used):
            sig = bins.signature(b)
            if sig in tried:
                continue
            tried.add(sig)
            if bins.new_total(b, item) <= capacity:
                bins.place(b, item)
                current.append(b)
                recurse(i + 1)
                current.pop()
                bins.unplace(b, item)
                if state["best_bins"] <= lower:
                    return
        if used < state["best_bins"] - 1:
            b = bins.open_bin()
            bins.place(b, item)
            current.append(b)
            recurse(i + 1)
            current.pop()
            bins.unplace(b, item)
            bins.close_last()

    optimal = True
    try:
        recurse(0)
    except _BudgetExpired:
        optimal = False
    if state["best_bins"] <= lower:
        optimal = True
    return _StageOutcome(
        assignment=state["best_assignment"],
        objective=state["best_bins"],
        optimal=optimal,
        improved=state["improved"],
        seconds=time.monotonic() - started,
        nodes=clock.nodes,
    )


def _search_min_smallest(
    items: Sequence[SampleRecord],
    capacity: int,
    paddings: Mapping[str, int],
    n_bins: int,
    seed_assignment: Sequence[int] | None,
    budget: SolverBudget,
) -> _StageOutcome:
    """Branch and bound for the packing into exactly ``n_bins`` non-empty
    bins whose smallest padded total is minimal."""
    started = time.monotonic()
    clock = _BudgetClock(budget)
    state: dict = {"best_obj": None, "best_assignment": None, "improved": False, "feasible_seen": False}
    if seed_assignment is not None:
        totals = _assignment_totals(items, seed_assignment, paddings, n_bins)
        state["best_obj"] = min(totals)
        state["best_assignment"] = list(seed_assignment)
        state["feasible_seen"] = True

    bins = _BinState(paddings)
    current: list[int] = []
    min_single_suffix = [0] * (len(items) + 1)
    min_single_suffix[-1] = capacity + 1
    for i in range(len(items) - 1, -1, -1):
        single = padded_len(items[i].length_tokens, paddings[items[i].adapter_id])
        min_single_suffix[i] = min(min_single_suffix[i + 1], single)

    def recurse(i: int) -> None:
        if clock.tick():
            raise _BudgetExpired
        used = len(bins.totals)
        remaining = len(items) - i
        if remaining < n_bins - used:
            return  # not enough samples left to make every bin non-empty
        if i == len(items):
            if used == n_bins:
                state["feasible_seen"] = True
                obj = min(bins.totals)
                if state["best_obj"] is None or obj < state["best_obj"]:
                    state["best_obj"] = obj
                    state["best_assignment"] = list(current)
                    state["improved"] = True
            return
        if state["best_obj"] is not None:
            bound = min(bins.totals) if used == n_bins else min(
                bins.totals + [min_single_suffix[i]]
            )
            if bound >= state["best_obj"]:
                return
        item = items[i]
        tried: set[tuple] = set()
        for b in range(used):
            sig = bins.signature(b)
            if sig in tried:
                continue
            tried.add(sig)
            if bins.new_total(b, item) <= capacity:
                bins.place(b, item)
                current.append(b)
                recurse(i + 1)
                current.pop()
                bins.unplace(b, item)
        if used < n_bins:
            b = bins.open_bin()
            bins.place(b, item)
            current.append(b)
            recurse(i + 1)
            current.pop()
            bins.unplace(b, item)
            bins.close_last()

    optimal = True
    try:
        recurse(0)
    except _BudgetExpired:
        optimal = False
    return _StageOutcome(
        assignment=state["best_assignment"],
        objective=state["best_obj"],
        optimal=optimal,
        improved=state["improved"],
        seconds=time.monotonic() - started,
        nodes=clock.nodes,
    )


def _assignment_totals(
    items: Sequence[SampleRecord],
    assignment: Sequence[int],
    paddings: Mapping[str, int],
    n_bins: int,
) -> list[int]:
    raws: list[dict[str, int]] = [dict() for _ in range(n_bins)]
    for item, b in zip(items, assignment):
        raws[b][item.adapter_id] = raws[b].get(item.adapter_id, 0) + item.length_tokens
    totals = []
    for raw in raws:
        if not raw:
            raise ValidationError("seed assignment leaves a bin empty")
        totals.append(sum(padded_len(v, paddings[a]) for a, v in raw.items()))
    return totals


def _assignment_of(result: PackingResult, items: Sequence[SampleRecord]) -> list[int]:
    where = {}
    for b, mb in enumerate(result.microbatches):
        for seg in mb.segments:
            for ref in seg.samples:
                where[ref.sample_id] = b
    return [where[item.sample_id] for item in items]


@dataclass(frozen=True)
class MinBinsResult:
    bin_count: int
    microbatches: tuple[Microbatch, ...] | None
    optimal: bool
    seconds: float
    nodes: int


def milp_min_bins(
    samples: Sequence[SampleRecord],
    capacity: int,
    paddings: Mapping[str, int],
    budget: SolverBudget,
    upper_bound: PackingResult | None = None,
) -> MinBinsResult:
    """Exact minimum microbatch count, or the best incumbent at budget expiry.

    The greedy packing (computed here when not supplied) seeds the incumbent,
    so the result never exceeds the greedy bin count.
    """
    if not samples:
        return MinBinsResult(0, (), True, 0.0, 0)
    _check_packable(samples, capacity, paddings)
    if upper_bound is None:
        upper_bound = greedy_pack(samples, capacity, paddings)
    items = _sorted_items(samples)
    outcome = _search_min_bins(
        items, capacity, paddings,
        _assignment_of(upper_bound, items), upper_bound.bin_count, budget,
    )
    microbatches = _build_microbatches(
        items, outcome.assignment, paddings, capacity, outcome.objective
    )
    return MinBinsResult(outcome.objective, microbatches, outcome.optimal, outcome.seconds, outcome.nodes)


def milp_min_smallest_bin(
    samples: Sequence[SampleRecord],
    capacity: int,
    paddings: Mapping[str, int],
    n_bins: int,
    budget: SolverBudget,
    seed: PackingResult | None = None,
) -> PackingResult:
    """Among packings into exactly ``n_bins`` non-empty bins, minimize the
    smallest bin's padded tokens. Raises InfeasibleBinCountError when the
    search proves no such packing exists."""
    if not samples:
        if n_bins == 0:
            return _empty_result("milp")
        raise InfeasibleBinCountError(f"cannot fill {n_bins} bins with no samples")
    _check_packable(samples, capacity, paddings)
    if n_bins < 1 or n_bins > len(samples):
        raise InfeasibleBinCountError(
            f"{len(samples)} samples cannot fill exactly {n_bins} non-empty bins"
        )
    items = _sorted_items(samples)
    seed_assignment = None
    if seed is not None and seed.bin_count == n_bins:
        seed_assignment = _assignment_of(seed, items)
    outcome = _search_min_smallest(items, capacity, paddings, n_bins, seed_assignment, budget)
    if outcome.assignment is None:
        if outcome.optimal:
            raise InfeasibleBinCountError(
                f"no packing of {len(items)} samples into exactly {n_bins} bins "
                f"fits capacity {capacity}"
            )
        raise SolverError(
            f"budget expired before any feasible {n_bins}-bin packing was found"
        )
    microbatches = _build_microbatches(items, outcome.assignment, paddings, capacity, n_bins)
    return PackingResult(
        microbatches=microbatches,
        solver_used="milp",
        stage1_optimal=False,
        stage2_optimal=outcome.optimal,
        stage2_seconds=outcome.seconds,
        stage2_smallest=outcome.objective,
    )


def pack_global_batch(
    samples: Sequence[SampleRecord],
    capacity: int,
    paddings: Mapping[str, int],
    budget: SolverBudget,
) -> PackingResult:
    """Greedy baseline, then the two solver stages, then the selection rule.

    The solver can never return more bins than greedy. At equal bin counts
    the greedy packing wins unless the solver found a strictly smaller
    smallest bin (more space for later merging).
    """
    if capacity < 1:
        raise ValidationError(f"capacity must be >= 1, got {capacity}")
    if not samples:
        return _empty_result()
    greedy = greedy_pack(samples, capacity, paddings)
    items = _sorted_items(samples)
    greedy_assignment = _assignment_of(greedy, items)

    stage1 = _search_min_bins(
        items, capacity, paddings, greedy_assignment, greedy.bin_count, budget
    )
    b_star = min(stage1.objective, greedy.bin_count)
    seed_assignment = stage1.assignment if stage1.improved else greedy_assignment

    stage2 = _search_min_smallest(items, capacity, paddings, b_star, seed_assignment, budget)

    milp_smallest = stage2.objective
    diag = dict(
        stage1_optimal=stage1.optimal,
        stage2_optimal=stage2.optimal,
        stage1_seconds=stage1.seconds,
        stage2_seconds=stage2.seconds,
        greedy_bins=greedy.bin_count,
        greedy_smallest=greedy.smallest_bin_tokens,
        stage1_bins=b_star,
        stage2_smallest=milp_smallest,
    )
    if b_star == greedy.bin_count and milp_smallest >= greedy.smallest_bin_tokens:
        return PackingResult(microbatches=greedy.microbatches, solver_used="greedy", **diag)
    microbatches = _build_microbatches(items, stage2.assignment, paddings, capacity, b_star)
    # Stage 2 either concluded (improved the arrangement or proved the seed
    # optimal) or expired having contributed nothing beyond stage 1's
    # certificate.
    solver = "milp" if (stage2.improved or stage2.optimal) else "milp_stage1_greedy_stage2"
    return PackingResult(microbatches=microbatches, solver_used=solver, **diag)


def _pack_batch_job(args) -> tuple[int, PackingResult | None, str | None]:
    index, samples, capacity, paddings, budget = args
    try:
        return index, pack_global_batch(samples, capacity, paddings, budget), None
    except SchedulerError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def pack_all(
    batches: Mapping[int, Sequence[SampleRecord]],
    capacity: int,
    paddings: Mapping[str, int],
    budget: SolverBudget,
    worker_count: int = 1,
) -> dict[int, PackingResult]:
    """Pack every global batch; batches are independent, so the result is
    identical for any worker count. Output is keyed in batch-index order."""
    if worker_count < 1:
        raise ValidationError(f"worker_count must be >= 1, got {worker_count}")
    indices = sorted(batches)
    jobs = [(i, list(batches[i]), capacity, dict(paddings), budget) for i in indices]
    results: dict[int, PackingResult] = {}
    if worker_count == 1 or len(jobs) <= 1:
        outcomes = map(_pack_batch_job, jobs)
    else:
        with ProcessPoolExecutor(max_workers=worker_count) as pool:
            outcomes = list(pool.map(_pack_batch_job, jobs))
    for index, result, error in outcomes:
        if error is not None:
            raise BatchPackingError(index, error)
        results[index] = result
    return results
