"""Global schedule assembly, commit-gap verification, merging, and repair.

A schedule is an ordered list of microbatch and no-op slots fed to the
pipeline; an entry's position is its commit index. With S pipeline stages,
consecutive global batches of any one adapter must commit at least S-1 slots
apart, so that a batch's backward work has drained before the next batch of
the same adapter enters. ``check_bubble_lemma`` reports violations of that
spacing, ``merge_pass`` shifts whole samples across adjacent batch boundaries
when the spacing allows, and ``verify_and_fix`` restores spacing by inserting
no-op slots.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError
from .grouping import GroupingPlan
from .packing import Microbatch, MicrobatchSegment, PackingResult, SampleRef, padded_len

SCHEDULE_SCHEMA_VERSION = 1

KIND_MICROBATCH = "microbatch"
KIND_NOOP = "noop"


@dataclass(frozen=True)
class ScheduleEntry:
    """One pipeline slot: a real microbatch or a no-op spacer.

    Provenance records which group and global-batch round emitted the slot;
    no-ops carry zero tokens.
    """

    kind: str
    microbatch: Microbatch | None
    group_id: int
    global_batch_index: int

    def __post_init__(self):
        if self.kind not in (KIND_MICROBATCH, KIND_NOOP):
            raise ValidationError(f"unknown entry kind {self.kind!r}")
        if (self.kind == KIND_MICROBATCH) != (self.microbatch is not None):
            raise ValidationError("microbatch entries carry a payload; no-ops carry none")


@dataclass(frozen=True)
class Schedule:
    """Ordered pipeline slots; an entry's list position is its commit index."""

    entries: tuple[ScheduleEntry, ...]
    stage_count: int
    capacity: int | None = None

    def __post_init__(self):
        if self.stage_count < 1:
            raise ValidationError(f"stage_count must be >= 1, got {self.stage_count}")

    @property
    def microbatch_count(self) -> int:
        return sum(1 for e in self.entries if e.kind == KIND_MICROBATCH)

    @property
    def noop_count(self) -> int:
        return sum(1 for e in self.entries if e.kind == KIND_NOOP)

    def sample_multiset(self) -> dict[tuple[str, str], int]:
        """(adapter_id, sample_id) occurrence counts, for conservation checks."""
        counts: dict[tuple[str, str], int] = {}
        for e in self.entries:
            if e.microbatch is None:
                continue
            for seg in e.microbatch.segments:
                for ref in seg.samples:
                    key = (seg.adapter_id, ref.sample_id)
                    counts[key] = counts.get(key, 0) + 1
        return counts


@dataclass(frozen=True)
class BubbleViolation:
    adapter_id: str
    prev_batch: int
    next_batch: int
    prev_last_index: int
    commit_index: int
    required_index: int


def build_schedule(
    packings: Mapping[int, Mapping[int, PackingResult] | Sequence[PackingResult]],
    plan: GroupingPlan,
    stage_count: int,
    capacity: int | None = None,
) -> Schedule:
    """Interleave per-group packings round-robin by global batch index.

    Round j emits every group's batch-j microbatches in the plan's round
    robin order; groups whose datasets end early simply contribute nothing to
    later rounds. Within one (group, batch) the fullest bins go first, so the
    least-full bin sits last where the merge pass targets it.
    """
    normalized: dict[int, dict[int, PackingResult]] = {}
    for gid in plan.round_robin_order:
        if gid not in packings:
            raise ValidationError(f"missing packings for group {gid}")
        per_group = packings[gid]
        if not isinstance(per_group, Mapping):
            per_group = {i: p for i, p in enumerate(per_group)}
        for j in range(len(per_group)):
            if j not in per_group:
                raise ValidationError(f"missing packing for group {gid}, global batch {j}")
        normalized[gid] = dict(per_group)

    n_rounds = max((len(v) for v in normalized.values()), default=0)
    entries: list[ScheduleEntry] = []
    for j in range(n_rounds):
        for gid in plan.round_robin_order:
            result = normalized[gid].get(j)
            if result is None:
                continue
            ordered = sorted(
                result.microbatches,
                key=lambda mb: (
                    -mb.total_padded_tokens,
                    mb.segments[0].samples[0].sample_id if mb.segments else "",
                ),
            )
            for mb in ordered:
                entries.append(ScheduleEntry(KIND_MICROBATCH, mb, gid, j))
    return Schedule(tuple(entries), stage_count, capacity)


def _batch_spans(schedule: Schedule) -> dict[str, dict[int, tuple[int, int]]]:
    """Per adapter, per global batch: (first, last) commit index."""
    spans: dict[str, dict[int, tuple[int, int]]] = {}
    for idx, entry in enumerate(schedule.entries):
        if entry.microbatch is None:
            continue
        for seg in entry.microbatch.segments:
            per = spans.setdefault(seg.adapter_id, {})
            first, last = per.get(seg.global_batch_index, (idx, idx))
            per[seg.global_batch_index] = (min(first, idx), max(last, idx))
    return spans


def check_bubble_lemma(schedule: Schedule, stage_count: int) -> list[BubbleViolation]:
    """Report every entry that commits a batch too soon after its predecessor.

    For each adapter and each pair of successive present batches (j, j'), let
    k be the last commit of batch j; every batch-j' entry at an index below
    k + S - 1 is a violation. With S = 1 nothing can violate.
    """
    if stage_count < 1:
        raise ValidationError(f"stage_count must be >= 1, got {stage_count}")
    gap = stage_count - 1
    if gap == 0:
        return []
    # Collect per (adapter, batch) all commit indices so each offending entry
    # is reported individually.
    indices: dict[str, dict[int, list[int]]] = {}
    for idx, entry in enumerate(schedule.entries):
        if entry.microbatch is None:
            continue
        for seg in entry.microbatch.segments:
            indices.setdefault(seg.adapter_id, {}).setdefault(seg.global_batch_index, []).append(idx)
    violations: list[BubbleViolation] = []
    for adapter_id in sorted(indices):
        batches = sorted(indices[adapter_id])
        for prev, nxt in zip(batches, batches[1:]):
            k = max(indices[adapter_id][prev])
            required = k + gap
            for idx in indices[adapter_id][nxt]:
                if idx < required:
                    violations.append(
                        BubbleViolation(adapter_id, prev, nxt, k, idx, required)
                    )
    violations.sort(key=lambda v: (v.commit_index, v.adapter_id, v.next_batch))
    return violations


class _MutableBin:
    """Working copy of one microbatch during the merge pass."""

    __slots__ = ("segments", "group_id", "global_batch_index")

    def __init__(self, entry: ScheduleEntry):
        self.group_id = entry.group_id
        self.global_batch_index = entry.global_batch_index
        # (adapter_id, batch) -> {sample_id: length}
        self.segments: dict[tuple[str, int], dict[str, int]] = {}
        if entry.microbatch is not None:
            for seg in entry.microbatch.segments:
                self.segments[(seg.adapter_id, seg.global_batch_index)] = {
                    ref.sample_id: ref.length_tokens for ref in seg.samples
                }

    def padded_total(self, paddings: Mapping[str, int]) -> int:
        total = 0
        for (adapter_id, _), samples in self.segments.items():
            total += padded_len(sum(samples.values()), paddings[adapter_id])
        return total

    def padded_total_with(
        self, adapter_id: str, batch: int, length: int, paddings: Mapping[str, int]
    ) -> int:
        key = (adapter_id, batch)
        total = 0
        for (a, _), samples in ((k, v) for k, v in self.segments.items() if k != key):
            total += padded_len(sum(samples.values()), paddings[a])
        existing = sum(self.segments.get(key, {}).values())
        return total + padded_len(existing + length, paddings[adapter_id])

    def add(self, adapter_id: str, batch: int, sample_id: str, length: int) -> None:
        self.segments.setdefault((adapter_id, batch), {})[sample_id] = length

    def remove(self, adapter_id: str, batch: int, sample_id: str) -> None:
        key = (adapter_id, batch)
        del self.segments[key][sample_id]
        if not self.segments[key]:
            del self.segments[key]

    @property
    def empty(self) -> bool:
        return not self.segments

    def freeze(self, paddings: Mapping[str, int], capacity: int | None) -> Microbatch:
        segs = tuple(
            MicrobatchSegment(
                adapter_id=a,
                global_batch_index=j,
                samples=tuple(
                    SampleRef(sid, ln) for sid, ln in sorted(samples.items())
                ),
                padding_multiple=paddings[a],
            )
            for (a, j), samples in sorted(self.segments.items())
        )
        return Microbatch(segments=segs, capacity=capacity)


class _SpanIndex:
    """First/last commit positions per (adapter, batch), updatable under
    sample moves and entry deletions."""

    def __init__(self, bins: list[_MutableBin | None], entries: Sequence[ScheduleEntry]):
        self.positions: dict[tuple[str, int], dict[int, int]] = {}
        for pos, b in enumerate(bins):
            if b is None:
                continue
            for (adapter_id, batch), samples in b.segments.items():
                per = self.positions.setdefault((adapter_id, batch), {})
                per[pos] = per.get(pos, 0) + len(samples)

    def first(self, key: tuple[str, int]) -> int | None:
        per = self.positions.get(key)
        return min(per) if per else None

    def last(self, key: tuple[str, int]) -> int | None:
        per = self.positions.get(key)
        return max(per) if per else None

    def move(self, key: tuple[str, int], src: int, dst: int) -> None:
        per = self.positions[key]
        per[src] -= 1
        if per[src] == 0:
            del per[src]
        per[dst] = per.get(dst, 0) + 1

    def batches_of(self, adapter_id: str) -> list[int]:
        return sorted(b for (a, b) in self.positions if a == adapter_id)

    def adapters(self) -> list[str]:
        return sorted({a for (a, _) in self.positions})

    def shift_after(self, pos: int) -> None:
        for key, per in self.positions.items():
            if any(p > pos for p in per):
                self.positions[key] = {
                    (p - 1 if p > pos else p): c for p, c in per.items()
                }


def merge_pass(schedule: Schedule, capacity: int, stage_count: int) -> Schedule:
    """Shift whole samples from each next global batch into the previous
    batch's final microbatch, whenever capacity and commit spacing allow.

    Moves are checked incrementally: a sample of adapter a, batch j+1 may
    commit at the target position only if it stays at least S-1 slots after
    adapter a's last batch-j commit. Donor bins emptied by moves are deleted
    unless the resulting index shift would squeeze any adapter's batch gap
    below S-1; those stay behind as empty microbatches. Existing spacing
    violations are never made worse, and entry count never grows.
    """
    if capacity < 1:
        raise ValidationError(f"capacity must be >= 1, got {capacity}")
    gap = stage_count - 1
    entries = schedule.entries
    paddings: dict[str, int] = {}
    for e in entries:
        if e.microbatch is not None:
            for seg in e.microbatch.segments:
                paddings[seg.adapter_id] = seg.padding_multiple

    bins: list[_MutableBin | None] = [
        _MutableBin(e) if e.kind == KIND_MICROBATCH else None for e in entries
    ]
    spans = _SpanIndex(bins, entries)

    # Positions of every (group, round) in schedule order; rounds stay
    # contiguous because moves never relocate entries.
    group_rounds: dict[tuple[int, int], list[int]] = {}
    for pos, e in enumerate(entries):
        if e.kind == KIND_MICROBATCH:
            group_rounds.setdefault((e.group_id, e.global_batch_index), []).append(pos)

    boundaries = sorted(
        (positions[-1], g, j)
        for (g, j), positions in group_rounds.items()
        if (g, j + 1) in group_rounds
    )

    # The batch set per adapter is fixed under moves, so the predecessor of
    # each present batch can be resolved once up front.
    prior_batch: dict[tuple[str, int], int | None] = {}
    for a in spans.adapters():
        batches = spans.batches_of(a)
        for prev, cur in zip([None] + batches, batches):
            prior_batch[(a, cur)] = prev

    for target_pos, g, j in boundaries:
        target = bins[target_pos]
        for donor_pos in group_rounds[(g, j + 1)]:
            donor = bins[donor_pos]
            if donor is None or donor.empty:
                continue
            candidates = sorted(
                (
                    (length, sample_id, adapter_id, batch)
                    for (adapter_id, batch), samples in donor.segments.items()
                    for sample_id, length in samples.items()
                ),
            )
            for length, sample_id, adapter_id, batch in candidates:
                if target.padded_total_with(adapter_id, batch, length, paddings) > capacity:
                    continue
                prev = prior_batch.get((adapter_id, batch))
                if prev is not None:
                    prev_last = spans.last((adapter_id, prev))
                    if prev_last is not None and target_pos < prev_last + gap:
                        continue
                donor.remove(adapter_id, batch, sample_id)
                target.add(adapter_id, batch, sample_id, length)
                spans.move((adapter_id, batch), donor_pos, target_pos)

    # Delete bins emptied by the moves where the index shift is safe: a
    # deletion at position p narrows every batch gap spanning p by one slot.
    pair_keys = [
        (a, prev, nxt)
        for a in spans.adapters()
        for prev, nxt in zip(spans.batches_of(a), spans.batches_of(a)[1:])
    ]
    empty_positions = [
        pos for pos, b in enumerate(bins) if b is not None and b.empty
    ]
    deleted: set[int] = set()
    for pos in sorted(empty_positions, reverse=True):
        safe = True
        for a, prev, nxt in pair_keys:
            last_prev = spans.last((a, prev))
            first_next = spans.first((a, nxt))
            if last_prev is None or first_next is None:
                continue
            if last_prev < pos < first_next and (first_next - last_prev) - 1 < gap:
                safe = False
                break
        if safe:
            deleted.add(pos)
            spans.shift_after(pos)

    new_entries: list[ScheduleEntry] = []
    for pos, entry in enumerate(entries):
        if pos in deleted:
            continue
        if entry.kind == KIND_NOOP:
            new_entries.append(entry)
            continue
        new_entries.append(
            ScheduleEntry(
                KIND_MICROBATCH,
                bins[pos].freeze(paddings, entry.microbatch.capacity),
                entry.group_id,
                entry.global_batch_index,
            )
        )
    return Schedule(tuple(new_entries), schedule.stage_count, schedule.capacity)


def verify_and_fix(schedule: Schedule, stage_count: int) -> Schedule:
    """Insert the minimum no-ops before each too-early entry so every
    adapter's successive batches sit at least S-1 commits apart.

    Idempotent: a schedule that already satisfies the spacing comes back
    entry-for-entry unchanged.
    """
    gap = stage_count - 1
    if gap == 0:
        return schedule
    out: list[ScheduleEntry] = []
    last_commit: dict[tuple[str, int], int] = {}
    seen_batches: dict[str, set[int]] = {}
    for entry in schedule.entries:
        if entry.kind == KIND_NOOP:
            out.append(entry)
            continue
        pos = len(out)
        required = pos
        for seg in entry.microbatch.segments:
            prior = [b for b in seen_batches.get(seg.adapter_id, ()) if b < seg.global_batch_index]
            if prior:
                last_prev = last_commit[(seg.adapter_id, max(prior))]
                required = max(required, last_prev + gap)
        for _ in range(required - pos):
            out.append(ScheduleEntry(KIND_NOOP, None, entry.group_id, entry.global_batch_index))
        pos = len(out)
        out.append(entry)
        for seg in entry.microbatch.segments:
            last_commit[(seg.adapter_id, seg.global_batch_index)] = pos
            seen_batches.setdefault(seg.adapter_id, set()).add(seg.global_batch_index)
    fixed = Schedule(tuple(out), schedule.stage_count, schedule.capacity)
    # Spacing can only repair schedules that commit each adapter's batches in
    # order; anything else cannot be fixed by inserting slots.
    if check_bubble_lemma(fixed, stage_count):
        raise ValidationError(
            "schedule commits some adapter's global batches out of order; "
            "no-op insertion cannot restore the required spacing"
        )
    return fixed


def schedule_to_doc(schedule: Schedule, adapters: Iterable | None = None, extra: dict | None = None) -> dict:
    """Serialize to the versioned JSON document consumed by the simulator
    and by external training systems."""
    entries = []
    for idx, e in enumerate(schedule.entries):
        doc: dict = {
            "kind": e.kind,
            "commit_index": idx,
            "group_id": e.group_id,
            "global_batch_index": e.global_batch_index,
        }
        if e.microbatch is not None:
            doc["total_padded_tokens"] = e.microbatch.total_padded_tokens
            doc["total_raw_tokens"] = e.microbatch.total_raw_tokens
            doc["segments"] = [
                {
                    "adapter_id": seg.adapter_id,
                    "global_batch_index": seg.global_batch_index,
                    "padding_multiple": seg.padding_multiple,
                    "raw_tokens": seg.raw_tokens,
                    "padded_tokens": seg.padded_tokens,
                    "samples": [
                        {"sample_id": r.sample_id, "length": r.length_tokens}
                        for r in seg.samples
                    ],
                }
                for seg in e.microbatch.segments
            ]
        entries.append(doc)
    doc = {
        "schema_version": SCHEDULE_SCHEMA_VERSION,
        "stage_count": schedule.stage_count,
        "capacity": schedule.capacity,
        "entries": entries,
    }
    if adapters is not None:
        doc["adapters"] = [
            {
                "adapter_id": a.adapter_id,
                "global_batch_size": a.global_batch_size,
                "padding_multiple": a.padding_multiple,
                "lora_rank": a.lora_rank,
                "alpha": a.alpha,
                "dropout_p": a.dropout_p,
            }
            for a in adapters
        ]
    if extra:
        doc.update(extra)
    return doc


def _require(doc: Mapping, key: str, where: str):
    if key not in doc:
        raise ValidationError(f"{where}: missing field {key!r}")
    return doc[key]


def schedule_from_doc(doc: Mapping) -> Schedule:
    """Parse and validate a schedule document; raises a validation error
    naming the first offending field."""
    version = _require(doc, "schema_version", "schedule")
    if version != SCHEDULE_SCHEMA_VERSION:
        raise ValidationError(
            f"schedule: unsupported schema_version {version!r} "
            f"(expected {SCHEDULE_SCHEMA_VERSION})"
        )
    stage_count = _require(doc, "stage_count", "schedule")
    if not isinstance(stage_count, int) or stage_count < 1:
        raise ValidationError(f"schedule: stage_count must be a positive integer, got {stage_count!r}")
    capacity = doc.get("capacity")
    entries_doc = _require(doc, "entries", "schedule")
    entries: list[ScheduleEntry] = []
    for i, e in enumerate(entries_doc):
        where = f"entries[{i}]"
        kind = _require(e, "kind", where)
        group_id = _require(e, "group_id", where)
        batch = _require(e, "global_batch_index", where)
        if kind == KIND_NOOP:
            entries.append(ScheduleEntry(KIND_NOOP, None, group_id, batch))
            continue
        if kind != KIND_MICROBATCH:
            raise ValidationError(f"{where}: unknown kind {kind!r}")
        segs = []
        for s, seg in enumerate(_require(e, "segments", where)):
            sw = f"{where}.segments[{s}]"
            samples = tuple(
                SampleRef(
                    _require(r, "sample_id", f"{sw}.samples[{k}]"),
                    _require(r, "length", f"{sw}.samples[{k}]"),
                )
                for k, r in enumerate(_require(seg, "samples", sw))
            )
            segs.append(
                MicrobatchSegment(
                    adapter_id=_require(seg, "adapter_id", sw),
                    global_batch_index=_require(seg, "global_batch_index", sw),
                    samples=samples,
                    padding_multiple=_require(seg, "padding_multiple", sw),
                )
            )
        mb = Microbatch(segments=tuple(segs), capacity=None)
        declared = e.get("total_padded_tokens")
        if declared is not None and declared != mb.total_padded_tokens:
            raise ValidationError(
                f"{where}.total_padded_tokens: declared {declared}, "
                f"recomputed {mb.total_padded_tokens}"
            )
        entries.append(ScheduleEntry(KIND_MICROBATCH, mb, group_id, batch))
    return Schedule(tuple(entries), stage_count, capacity)
