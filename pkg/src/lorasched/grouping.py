"""Adapter grouping: head-tail pairing by mean sample length.

Groups execute round-robin, so consecutive global batches of any one adapter
are naturally spaced by the other groups' microbatches.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError
from .workload import DatasetStats


@dataclass(frozen=True)
class AdapterGroup:
    group_id: int
    adapter_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.adapter_ids:
            raise ValidationError("adapter group must be non-empty")


@dataclass(frozen=True)
class GroupingPlan:
    groups: tuple[AdapterGroup, ...]
    round_robin_order: tuple[int, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for g in self.groups:
            for a in g.adapter_ids:
                if a in seen:
                    raise ValidationError(f"adapter {a!r} appears in more than one group")
                seen.add(a)

    @property
    def adapter_ids(self) -> tuple[str, ...]:
        return tuple(a for g in self.groups for a in g.adapter_ids)

    def group_of(self, adapter_id: str) -> int:
        for g in self.groups:
            if adapter_id in g.adapter_ids:
                return g.group_id
        raise ValidationError(f"adapter {adapter_id!r} not in plan")

    def to_dict(self) -> dict:
        return {
            "groups": [
                {"group_id": g.group_id, "adapter_ids": list(g.adapter_ids)} for g in self.groups
            ],
            "round_robin_order": list(self.round_robin_order),
        }


def group_adapters(stats: Sequence[DatasetStats], group_size: int = 2) -> GroupingPlan:
    """Partition adapters into ordered groups by head-tail pairing.

    Adapters are sorted ascending by mean token length (ties broken by
    adapter id), then each group alternately takes the shortest and longest
    remaining adapter until it holds ``group_size`` members. Fewer than
    ``group_size`` leftovers form one final group of their own. The result is
    invariant to the input ordering of ``stats``.
    """
    if not stats:
        raise ValidationError("cannot group an empty adapter list")
    if group_size < 1:
        raise ValidationError(f"group_size must be >= 1, got {group_size}")
    seen: set[str] = set()
    for s in stats:
        if s.adapter_id in seen:
            raise ValidationError(f"duplicate stats for adapter {s.adapter_id!r}")
        seen.add(s.adapter_id)

    ordered = deque(
        s.adapter_id for s in sorted(stats, key=lambda s: (s.mean_tokens, s.adapter_id))
    )
    groups: list[AdapterGroup] = []
    while len(ordered) >= group_size:
        members = [ordered.popleft() if i % 2 == 0 else ordered.pop() for i in range(group_size)]
        groups.append(AdapterGroup(len(groups), tuple(members)))
    if ordered:
        groups.append(AdapterGroup(len(groups), tuple(ordered)))
    return GroupingPlan(tuple(groups), tuple(range(len(groups))))
