"""Workload data model: adapter specs, sample records, dataset ingestion,
synthetic length-distribution generation, and global-batch assignment.

All types are immutable values; every operation here is a pure function and
safe to call concurrently.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError

UNASSIGNED_BATCH = -1

JSONL_KEYS = ("adapter_id", "sample_id", "length")


@dataclass(frozen=True)
class AdapterSpec:
    """One fine-tuning job: its adapter hyperparameters and batching knobs."""

    adapter_id: str
    global_batch_size: int
    padding_multiple: int = 64
    lora_rank: int = 16
    alpha: float = 32.0
    dropout_p: float = 0.0

    def __post_init__(self):
        if not self.adapter_id:
            raise ValidationError("adapter_id must be a non-empty string")
        if self.global_batch_size < 1:
            raise ValidationError(f"global_batch_size must be >= 1, got {self.global_batch_size}")
        if self.padding_multiple < 1:
            raise ValidationError(f"padding_multiple must be >= 1, got {self.padding_multiple}")
        if self.lora_rank < 1:
            raise ValidationError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass(frozen=True)
class SampleRecord:
    """One training sample, known only by its token length.

    ``global_batch_index`` stays at the ``UNASSIGNED_BATCH`` sentinel until
    :func:`assign_global_batches` labels the record.
    """

    adapter_id: str
    sample_id: str
    length_tokens: int
    global_batch_index: int = UNASSIGNED_BATCH

    def __post_init__(self):
        if self.length_tokens < 1:
            raise ValidationError(
                f"sample {self.sample_id!r}: length_tokens must be >= 1, got {self.length_tokens}"
            )
        if self.global_batch_index < UNASSIGNED_BATCH:
            raise ValidationError("global_batch_index must be >= 0 or the unassigned sentinel")


@dataclass(frozen=True)
class DatasetStats:
    """Length statistics for one adapter's dataset (nearest-rank percentiles)."""

    adapter_id: str
    count: int
    mean_tokens: float
    p50: int
    p95: int
    max_tokens: int


@dataclass(frozen=True)
class LengthComponent:
    """One mixture component of a synthetic length distribution.

    ``location`` is in tokens. For ``kind="normal"`` it is the component mean;
    for ``kind="lognormal"`` it is the median (scale is the log-space sigma),
    so a scale of 0 degenerates to ``location`` for either kind.
    """

    weight: float
    location: float
    scale: float
    kind: str = "lognormal"
    min_tokens: int = 1
    max_tokens: int = 1 << 20

    def __post_init__(self):
        if not self.weight > 0:
            raise ValidationError(f"component weight must be > 0, got {self.weight}")
        if self.kind not in ("normal", "lognormal"):
            raise ValidationError(f"unknown component kind {self.kind!r}")
        if self.scale < 0:
            raise ValidationError(f"component scale must be >= 0, got {self.scale}")
        if self.kind == "lognormal" and not self.location > 0:
            raise ValidationError("lognormal component needs location > 0")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ValidationError(
                f"truncation bounds must satisfy 1 <= min <= max, got "
                f"[{self.min_tokens}, {self.max_tokens}]"
            )


@dataclass(frozen=True)
class LengthDistributionSpec:
    """Seeded mixture of length components; weights must sum to 1."""

    components: tuple[LengthComponent, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.components:
            raise ValidationError("distribution needs at least one component")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"component weights must sum to 1, got {total!r}")


def load_samples(path: str | Path, fmt: str | None = None) -> list[SampleRecord]:
    """Read sample records from a JSONL or CSV file, preserving file order.

    JSONL lines are objects with keys ``adapter_id``, ``sample_id`` and
    ``length``; CSV files carry the same names in a header row. ``fmt`` is
    inferred from the suffix when omitted.
    """
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if fmt not in ("jsonl", "csv"):
        raise ValidationError(f"unknown dataset format {fmt!r} (expected jsonl or csv)")
    if fmt == "jsonl":
        return _load_jsonl(path)
    return _load_csv(path)


def _record_from_fields(fields: dict, path: Path, lineno: int) -> SampleRecord:
    for key in JSONL_KEYS:
        if key not in fields or fields[key] in (None, ""):
            raise ParseError(f"{path}:{lineno}: missing field {key!r}")
    try:
        length = int(fields["length"])
    except (TypeError, ValueError):
        raise ParseError(f"{path}:{lineno}: length {fields['length']!r} is not an integer") from None
    if length < 1:
        raise ValidationError(f"{path}:{lineno}: length must be >= 1, got {length}")
    return SampleRecord(str(fields["adapter_id"]), str(fields["sample_id"]), length)


def _load_jsonl(path: Path) -> list[SampleRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                fields = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(fields, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            records.append(_record_from_fields(fields, path, lineno))
    return records


def _load_csv(path: Path) -> list[SampleRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [k for k in JSONL_KEYS if k not in reader.fieldnames]
        if missing:
            raise ParseError(f"{path}:1: header is missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            records.append(_record_from_fields(row, path, lineno))
    return records


def save_samples(records: Iterable[SampleRecord], path: str | Path, fmt: str | None = None) -> None:
    """Write records to JSONL or CSV with the documented field names."""
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps({
                    "adapter_id": rec.adapter_id,
                    "sample_id": rec.sample_id,
                    "length": rec.length_tokens,
                }) + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(JSONL_KEYS)
            for rec in records:
                writer.writerow([rec.adapter_id, rec.sample_id, rec.length_tokens])
    else:
        raise ValidationError(f"unknown dataset format {fmt!r}")


def synthesize_dataset(spec: LengthDistributionSpec, n: int, adapter_id: str) -> list[SampleRecord]:
    """Draw ``n`` i.i.d. sample lengths from the mixture, deterministically.

    The same spec (including seed) always yields the identical sequence.
    Lengths are rounded to whole tokens and clamped to each component's
    truncation bounds.
    """
    if n < 0:
        raise ValidationError(f"sample count must be >= 0, got {n}")
    if n == 0:
        return []
    rng = np.random.default_rng(spec.seed)
    u = rng.random(n)
    z = rng.standard_normal(n)
    cum = np.cumsum([c.weight for c in spec.components])
    idx = np.minimum(np.searchsorted(cum, u, side="right"), len(spec.components) - 1)
    records = []
    for i in range(n):
        comp = spec.components[int(idx[i])]
        if comp.kind == "normal":
            value = comp.location + comp.scale * float(z[i])
        else:
            value = comp.location * math.exp(comp.scale * float(z[i]))
        length = int(round(value))
        length = max(comp.min_tokens, min(comp.max_tokens, length))
        records.append(SampleRecord(adapter_id, f"{adapter_id}-{i:06d}", length))
    return records


def assign_global_batches(samples: Sequence[SampleRecord], spec: AdapterSpec) -> list[SampleRecord]:
    """Label each sample with ``floor(position / global_batch_size)``.

    Pure re-labeling: order and lengths are untouched. All samples must belong
    to ``spec.adapter_id``.
    """
    for s in samples:
        if s.adapter_id != spec.adapter_id:
            raise ValidationError(
                f"sample {s.sample_id!r} belongs to adapter {s.adapter_id!r}, "
                f"not {spec.adapter_id!r}"
            )
    gbs = spec.global_batch_size
    return [replace(s, global_batch_index=i // gbs) for i, s in enumerate(samples)]


def compute_stats(samples: Sequence[SampleRecord], adapter_id: str | None = None) -> DatasetStats:
    """Exact mean plus nearest-rank p50/p95 and max, in tokens.

    Empty input yields count 0 with all statistics defined as 0.
    """
    if adapter_id is None:
        adapter_id = samples[0].adapter_id if samples else ""
    if not samples:
        return DatasetStats(adapter_id, 0, 0.0, 0, 0, 0)
    lengths = sorted(s.length_tokens for s in samples)
    n = len(lengths)

    def nearest_rank(p: float) -> int:
        return lengths[max(0, math.ceil(p / 100.0 * n) - 1)]

    return DatasetStats(
        adapter_id=adapter_id,
        count=n,
        mean_tokens=sum(lengths) / n,
        p50=nearest_rank(50),
        p95=nearest_rank(95),
        max_tokens=lengths[-1],
    )


def split_by_adapter(samples: Iterable[SampleRecord]) -> dict[str, list[SampleRecord]]:
    """Group records by adapter, preserving order within each adapter."""
    out: dict[str, list[SampleRecord]] = {}
    for s in samples:
        out.setdefault(s.adapter_id, []).append(s)
    return out


def split_global_batches(samples: Iterable[SampleRecord]) -> dict[int, list[SampleRecord]]:
    """Group assigned records by global batch index, preserving order."""
    out: dict[int, list[SampleRecord]] = {}
    for s in samples:
        if s.global_batch_index == UNASSIGNED_BATCH:
            raise ValidationError(f"sample {s.sample_id!r} has no global batch assigned")
        out.setdefault(s.global_batch_index, []).append(s)
    return out
