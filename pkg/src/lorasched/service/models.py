"""Pydantic request/response models for the HTTP service."""
from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class ComponentModel(BaseModel):
    weight: float
    location: float
    scale: float
    kind: Literal["normal", "lognormal"] = "lognormal"
    min_tokens: int = 1
    max_tokens: int = 1 << 20


class DistributionModel(BaseModel):
    components: list[ComponentModel]
    seed: int = -1  # -1: derive from the run seed


class DatasetModel(BaseModel):
    path: Optional[str] = None
    format: Optional[Literal["jsonl", "csv"]] = None
    samples: Optional[list[SampleModel]] = None


class SampleModel(BaseModel):
    adapter_id: str
    sample_id: str
    length: int


class AdapterModel(BaseModel):
    adapter_id: str
    global_batch_size: int = 16
    padding_multiple: int = 64
    lora_rank: int = 16
    alpha: float = 32.0
    dropout_p: float = 0.0
    dataset: Optional[DatasetModel] = None
    distribution: Optional[DistributionModel] = None
    count: int = 0


class TimeModelModel(BaseModel):
    per_token_cost: float = 1e-6
    fixed_overhead: float = 0.0
    mode: Literal["linear", "roofline"] = "linear"
    num_layers: int = 0
    hidden_size: int = 0


class HardwareModel(BaseModel):
    peak_flops_half: float
    mem_bandwidth: float
    machine_balance: Optional[float] = None


class RunConfigModel(BaseModel):
    """Inline run configuration; datasets are inline samples or synthetic
    specs (the service never reads the client's filesystem)."""

    model_config = ConfigDict(extra="forbid")

    adapters: list[AdapterModel]
    capacity: Optional[int] = None
    capacity_candidates: list[int] = Field(default_factory=list)
    stages: int = 4
    timeout_s: float = 10.0
    node_limit: Optional[int] = None
    group_size: int = 2
    workers: int = 1
    seed: int = 0
    samples_per_microbatch: int = 4
    backward_ratio: float = 2.0
    stage_multipliers: Optional[list[float]] = None
    time_model: TimeModelModel = Field(default_factory=TimeModelModel)
    hardware: Optional[HardwareModel] = None


class GenerateRequest(BaseModel):
    config: RunConfigModel
    adapter_ids: Optional[list[str]] = None


class GenerateResponse(BaseModel):
    schema_version: int
    datasets: dict[str, list[SampleModel]]


class ScheduleRequest(BaseModel):
    config: RunConfigModel


class ScheduleResponse(BaseModel):
    schedule: dict[str, Any]
    summary: dict[str, Any]


class SimulateRequest(BaseModel):
    schedule: dict[str, Any]
    time_model: TimeModelModel = Field(default_factory=TimeModelModel)
    hardware: Optional[HardwareModel] = None
    stages: Optional[int] = None
    backward_ratio: float = 2.0
    stage_multipliers: Optional[list[float]] = None
    record_trace: bool = False


class CompareRequest(BaseModel):
    config: RunConfigModel
    policies: Optional[list[str]] = None


class SweepRequest(BaseModel):
    config: RunConfigModel
    candidates: Optional[list[int]] = None
    num_microbatches: int = 16


class TrafficRequest(BaseModel):
    m: int
    k: int
    n: int
    r: int
    element_bytes: int = 2
    variant: Literal["unfused", "fused_lora", "fused_multi_lora"] = "unfused"


class ReportResponse(BaseModel):
    model_config = ConfigDict(extra="allow")
    schema_version: int
    mode: str
