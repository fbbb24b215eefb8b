"""Run configuration: YAML loading, flag overrides, and seed derivation.

One seed in the config drives all randomness; per-adapter synthetic datasets
derive their own deterministic sub-seeds from it unless a distribution pins
an explicit seed.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .costmodel import HardwareProfile, TimeModelParams
from .errors import ValidationError
from .packing import SolverBudget
from .workload import AdapterSpec, LengthComponent, LengthDistributionSpec


def derive_seed(master_seed: int, label: str) -> int:
    """Stable per-label sub-seed (CRC-based, platform independent)."""
    return (zlib.crc32(f"{master_seed}:{label}".encode()) ^ (master_seed & 0x7FFFFFFF)) & 0x7FFFFFFF


@dataclass(frozen=True)
class DatasetSource:
    """Where one adapter's samples come from: a file or a synthetic spec."""

    path: str | None = None
    format: str | None = None
    distribution: LengthDistributionSpec | None = None
    count: int | None = None

    def __post_init__(self):
        if (self.path is None) == (self.distribution is None):
            raise ValidationError("dataset source needs exactly one of path or distribution")
        if self.distribution is not None and (self.count is None or self.count < 0):
            raise ValidationError("synthetic dataset source needs a sample count >= 0")


@dataclass(frozen=True)
class RunConfig:
    adapters: tuple[AdapterSpec, ...]
    sources: Mapping[str, DatasetSource]
    capacity: int | None = None
    capacity_candidates: tuple[int, ...] = ()
    stages: int = 4
    timeout_s: float = 10.0
    node_limit: int | None = None
    group_size: int = 2
    workers: int = 1
    seed: int = 0
    samples_per_microbatch: int = 4
    backward_ratio: float = 2.0
    stage_multipliers: tuple[float, ...] | None = None
    time_model: TimeModelParams = field(default_factory=TimeModelParams)
    hardware: HardwareProfile | None = None
    out_dir: str = "runs/out"

    def __post_init__(self):
        if not self.adapters:
            raise ValidationError("run configuration needs at least one adapter")
        if self.capacity is None and not self.capacity_candidates:
            raise ValidationError("set capacity or capacity_candidates")
        if self.capacity is not None and self.capacity < 1:
            raise ValidationError(f"capacity must be >= 1, got {self.capacity}")
        if self.stages < 1:
            raise ValidationError(f"stages must be >= 1, got {self.stages}")
        if not self.timeout_s > 0:
            raise ValidationError(f"timeout must be > 0, got {self.timeout_s}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")
        if self.group_size < 1:
            raise ValidationError(f"group_size must be >= 1, got {self.group_size}")
        ids = [a.adapter_id for a in self.adapters]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate adapter ids")
        for adapter_id in ids:
            if adapter_id not in self.sources:
                raise ValidationError(f"no dataset source for adapter {adapter_id!r}")

    @property
    def budget(self) -> SolverBudget:
        return SolverBudget(timeout_s=self.timeout_s, node_limit=self.node_limit)

    def distribution_for(self, adapter_id: str) -> LengthDistributionSpec:
        source = self.sources[adapter_id]
        if source.distribution is None:
            raise ValidationError(f"adapter {adapter_id!r} has a file source, not a distribution")
        dist = source.distribution
        if dist.seed is None or dist.seed < 0:
            dist = replace(dist, seed=derive_seed(self.seed, adapter_id))
        return dist


def _component_from_dict(doc: Mapping[str, Any], where: str) -> LengthComponent:
    try:
        return LengthComponent(
            weight=float(doc["weight"]),
            location=float(doc["location"]),
            scale=float(doc["scale"]),
            kind=doc.get("kind", "lognormal"),
            min_tokens=int(doc.get("min_tokens", 1)),
            max_tokens=int(doc.get("max_tokens", 1 << 20)),
        )
    except KeyError as exc:
        raise ValidationError(f"{where}: missing field {exc.args[0]!r}") from None


def distribution_from_dict(doc: Mapping[str, Any], where: str = "distribution") -> LengthDistributionSpec:
    if "components" not in doc:
        raise ValidationError(f"{where}: missing field 'components'")
    components = tuple(
        _component_from_dict(c, f"{where}.components[{i}]") for i, c in enumerate(doc["components"])
    )
    # Seed -1 means "derive from the run seed".
    return LengthDistributionSpec(components=components, seed=int(doc.get("seed", -1)))


def config_from_dict(doc: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from a parsed config tree (YAML or JSON)."""
    if "adapters" not in doc or not doc["adapters"]:
        raise ValidationError("config: missing or empty 'adapters' list")
    adapters = []
    sources: dict[str, DatasetSource] = {}
    for i, a in enumerate(doc["adapters"]):
        where = f"adapters[{i}]"
        if "adapter_id" not in a:
            raise ValidationError(f"{where}: missing field 'adapter_id'")
        spec = AdapterSpec(
            adapter_id=a["adapter_id"],
            global_batch_size=int(a.get("global_batch_size", 16)),
            padding_multiple=int(a.get("padding_multiple", 64)),
            lora_rank=int(a.get("lora_rank", 16)),
            alpha=float(a.get("alpha", 32.0)),
            dropout_p=float(a.get("dropout_p", 0.0)),
        )
        adapters.append(spec)
        if "dataset" in a:
            ds = a["dataset"]
            sources[spec.adapter_id] = DatasetSource(
                path=ds.get("path"), format=ds.get("format")
            )
        elif "distribution" in a:
            sources[spec.adapter_id] = DatasetSource(
                distribution=distribution_from_dict(a["distribution"], f"{where}.distribution"),
                count=int(a.get("count", a["distribution"].get("count", 0))),
            )
        else:
            raise ValidationError(f"{where}: needs a 'dataset' or 'distribution' entry")

    tm_doc = doc.get("time_model", {})
    hardware = None
    if "hardware" in doc:
        hw = doc["hardware"]
        hardware = HardwareProfile(
            peak_flops_half=float(hw["peak_flops_half"]),
            mem_bandwidth=float(hw["mem_bandwidth"]),
            machine_balance=hw.get("machine_balance"),
        )
    time_model = TimeModelParams(
        per_token_cost=float(tm_doc.get("per_token_cost", 1e-6)),
        fixed_overhead=float(tm_doc.get("fixed_overhead", 0.0)),
        mode=tm_doc.get("mode", "linear"),
        hardware=hardware if tm_doc.get("mode") == "roofline" else None,
        num_layers=int(tm_doc.get("num_layers", 0)),
        hidden_size=int(tm_doc.get("hidden_size", 0)),
    )
    pipeline = doc.get("pipeline", {})
    multipliers = pipeline.get("stage_multipliers")
    return RunConfig(
        adapters=tuple(adapters),
        sources=sources,
        capacity=doc.get("capacity"),
        capacity_candidates=tuple(doc.get("capacity_candidates", ())),
        stages=int(doc.get("stages", 4)),
        timeout_s=float(doc.get("timeout_s", 10.0)),
        node_limit=doc.get("node_limit"),
        group_size=int(doc.get("group_size", 2)),
        workers=int(doc.get("workers", 1)),
        seed=int(doc.get("seed", 0)),
        samples_per_microbatch=int(doc.get("samples_per_microbatch", 4)),
        backward_ratio=float(pipeline.get("backward_ratio", doc.get("backward_ratio", 2.0))),
        stage_multipliers=tuple(multipliers) if multipliers else None,
        time_model=time_model,
        hardware=hardware,
        out_dir=doc.get("out_dir", "runs/out"),
    )


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Load a YAML config file and apply command-line overrides on top."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config root must be a mapping")
    if overrides:
        doc = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    return config_from_dict(doc)
