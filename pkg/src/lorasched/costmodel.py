"""Analytic cost models for adapter-equipped linear layers and microbatches.

Covers roofline arithmetic intensity, the adapter memory footprint, a
byte-counting model of per-kernel DRAM traffic for unfused vs. fused
execution, and the per-microbatch time model used by the pipeline simulator.

Traffic counting rules: every tensor operand is charged once per kernel that
touches it (no cache modeling, no tile-level re-reads); element counts are
multiplied by ``element_bytes``, dropout masks by one byte per element. The
no-adapter baseline (rank 0) is the ordinary trainable linear layer, whose
backward computes both the input and the weight gradient.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

from .errors import ValidationError

MASK_BYTES = 1

# Tile-level adapter routing table for the multi-adapter fused variant:
# one small descriptor read per row tile.
ROUTING_TILE_ROWS = 128
ROUTING_ENTRY_BYTES = 16

VARIANTS = ("unfused", "fused_lora", "fused_multi_lora")
PASSES = ("forward", "backward")


@dataclass(frozen=True)
class HardwareProfile:
    """Peak half-precision compute and memory bandwidth of one device."""

    peak_flops_half: float
    mem_bandwidth: float
    machine_balance: float | None = None

    def __post_init__(self):
        if not self.peak_flops_half > 0 or not self.mem_bandwidth > 0:
            raise ValidationError("hardware rates must be strictly positive")
        ratio = self.peak_flops_half / self.mem_bandwidth
        if self.machine_balance is None:
            object.__setattr__(self, "machine_balance", ratio)
        elif abs(self.machine_balance - ratio) > 1e-6 * ratio:
            raise ValidationError(
                f"machine_balance {self.machine_balance} inconsistent with "
                f"peak/bandwidth ratio {ratio}"
            )


# H100 SXM, FP16 dense: ~989 TFLOP/s over 3.35 TB/s HBM3 -> balance ~295.
H100_SXM = HardwareProfile(peak_flops_half=989e12, mem_bandwidth=3.35e12)


@dataclass(frozen=True)
class GemmShape:
    """Problem shape of one adapter-equipped linear layer."""

    m: int
    k: int
    n: int
    r: int
    element_bytes: int = 2

    def __post_init__(self):
        if min(self.m, self.k, self.n) < 1:
            raise ValidationError(f"m, k, n must all be >= 1, got {(self.m, self.k, self.n)}")
        if self.r < 0:
            raise ValidationError(f"rank must be >= 0, got {self.r}")
        if self.element_bytes < 1:
            raise ValidationError("element_bytes must be >= 1")
        if self.r > min(self.n, self.k):
            warnings.warn(
                f"rank {self.r} exceeds min(n, k) = {min(self.n, self.k)}; "
                "low-rank factorization buys nothing at this shape",
                stacklevel=2,
            )


@dataclass(frozen=True)
class KernelTraffic:
    kernel: str
    bytes_read: int
    bytes_written: int

    @property
    def total_bytes(self) -> int:
        return self.bytes_read + self.bytes_written


@dataclass(frozen=True)
class TrafficReport:
    """Per-kernel DRAM byte counts for one pass of one execution variant."""

    variant: str
    pass_name: str
    kernels: tuple[KernelTraffic, ...]

    @property
    def bytes_read(self) -> int:
        return sum(k.bytes_read for k in self.kernels)

    @property
    def bytes_written(self) -> int:
        return sum(k.bytes_written for k in self.kernels)

    @property
    def total_bytes(self) -> int:
        return self.bytes_read + self.bytes_written

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "pass": self.pass_name,
            "kernels": [
                {"kernel": k.kernel, "bytes_read": k.bytes_read, "bytes_written": k.bytes_written}
                for k in self.kernels
            ],
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
            "total_bytes": self.total_bytes,
        }


@dataclass(frozen=True)
class TimeModelParams:
    """Microbatch forward-time model.

    ``linear`` mode: fixed_overhead + per_token_cost * tokens. ``roofline``
    mode instead sums, per transformer layer, the larger of the compute and
    memory-traffic times given a hardware profile and model dimensions.
    """

    per_token_cost: float = 1e-6
    fixed_overhead: float = 0.0
    mode: str = "linear"
    hardware: HardwareProfile | None = None
    num_layers: int = 0
    hidden_size: int = 0
    element_bytes: int = 2

    def __post_init__(self):
        if not self.per_token_cost > 0:
            raise ValidationError(f"per_token_cost must be > 0, got {self.per_token_cost}")
        if self.fixed_overhead < 0:
            raise ValidationError("fixed_overhead must be >= 0")
        if self.mode not in ("linear", "roofline"):
            raise ValidationError(f"unknown time model mode {self.mode!r}")
        if self.mode == "roofline":
            if self.hardware is None or self.num_layers < 1 or self.hidden_size < 1:
                raise ValidationError(
                    "roofline mode needs a hardware profile, num_layers >= 1 and hidden_size >= 1"
                )


def arithmetic_intensity(r: int, n: int, m: int) -> float:
    """FLOPs per byte of the half-precision low-rank down-projection.

    Closed form 1 / (1/r + 1/n + 1/m); always below min(r, n, m) and tends to
    r as n and m grow, which is why small ranks are bandwidth-bound.
    """
    if min(r, n, m) < 1:
        raise ValidationError(f"r, n, m must all be >= 1, got {(r, n, m)}")
    return 1.0 / (1.0 / r + 1.0 / n + 1.0 / m)


def down_projection_intensity(r: int, k: int, m: int) -> float:
    """First-principles intensity of the (m,k)x(k,r) down-projection GEMM.

    Counts 2*m*k*r FLOPs over half-precision reads/writes of the input,
    weight, and output (m*k + k*r + m*r elements), i.e. 1/(1/r + 1/k + 1/m).
    Provided for comparison with :func:`arithmetic_intensity`, which uses the
    output dimension n in place of k.
    """
    if min(r, k, m) < 1:
        raise ValidationError(f"r, k, m must all be >= 1, got {(r, k, m)}")
    return 1.0 / (1.0 / r + 1.0 / k + 1.0 / m)


@dataclass(frozen=True)
class MemoryFootprint:
    full_ft_bytes: int
    lora_bytes: int
    reduction_factor: float
    trainable_fraction: float

    def to_dict(self) -> dict:
        return {
            "full_ft_bytes": self.full_ft_bytes,
            "lora_bytes": self.lora_bytes,
            "reduction_factor": self.reduction_factor,
            "trainable_fraction": self.trainable_fraction,
        }


def lora_memory_bytes(n: int, k: int, r: int) -> MemoryFootprint:
    """Model-state bytes per linear layer: full fine-tuning vs. low-rank.

    Half-precision weights with full-precision optimizer states: 16*n*k bytes
    for a fully trainable layer versus 2*n*k + 32*r*(n+k) with a frozen base
    and trainable rank-r factors. ``trainable_fraction`` reports the adapter
    parameter count r*(n+k) relative to the frozen n*k weights, computed from
    first principles rather than reconciled with any quoted figure.
    """
    if min(n, k, r) < 1:
        raise ValidationError(f"n, k, r must all be >= 1, got {(n, k, r)}")
    full = 16 * n * k
    lora = 2 * n * k + 32 * r * (n + k)
    return MemoryFootprint(
        full_ft_bytes=full,
        lora_bytes=lora,
        reduction_factor=full / lora,
        trainable_fraction=r * (n + k) / (n * k),
    )


def _frozen_kernels(shape: GemmShape, pass_name: str) -> list[KernelTraffic]:
    e = shape.element_bytes
    mk, mn, kn = shape.m * shape.k, shape.m * shape.n, shape.k * shape.n
    if pass_name == "forward":
        return [KernelTraffic("base_gemm", e * (mk + kn), e * mn)]
    return [
        KernelTraffic("grad_input_gemm", e * (mn + kn), e * mk),
        KernelTraffic("grad_weight_gemm", e * (mk + mn), e * kn),
    ]


def _unfused_kernels(shape: GemmShape, pass_name: str) -> list[KernelTraffic]:
    e = shape.element_bytes
    m, k, n, r = shape.m, shape.k, shape.n, shape.r
    mk, mn, kn, mr, kr, rn = m * k, m * n, k * n, m * r, k * r, r * n
    if pass_name == "forward":
        return [
            KernelTraffic("dropout", e * mk, e * mk + MASK_BYTES * mk),
            KernelTraffic("down_proj_gemm", e * (mk + kr), e * mr),
            KernelTraffic("up_proj_gemm", e * (mr + rn), e * mn),
            KernelTraffic("base_gemm", e * (mk + kn), e * mn),
            KernelTraffic("add_scale", e * 2 * mn, e * mn),
        ]
    return [
        KernelTraffic("grad_up_input_gemm", e * (mn + rn), e * mr),
        KernelTraffic("grad_up_weight_gemm", e * (mr + mn), e * rn),
        KernelTraffic("grad_down_input_gemm", e * (mr + kr), e * mk),
        KernelTraffic("grad_down_weight_gemm", e * (mk + mr), e * kr),
        KernelTraffic("grad_base_input_gemm", e * (mn + kn), e * mk),
        KernelTraffic("dropout_grad_accum", e * 2 * mk + MASK_BYTES * mk, e * mk),
    ]


def _fused_kernels(shape: GemmShape, pass_name: str, multi: bool) -> list[KernelTraffic]:
    e = shape.element_bytes
    m, k, n, r = shape.m, shape.k, shape.n, shape.r
    mk, mn, kn, mr, kr, rn = m * k, m * n, k * n, m * r, k * r, r * n
    if pass_name == "forward":
        kernels = [
            # Dropout feeds the down-projection in one kernel; the dropped
            # input, mask, and rank-r intermediate are all materialized for
            # the backward pass.
            KernelTraffic("dropout_down_proj_fused", e * (mk + kr), e * mk + MASK_BYTES * mk + e * mr),
            # Base GEMM with the scaled up-projection folded into its
            # epilogue: the full-size output is written exactly once.
            KernelTraffic("base_gemm_epilogue_fused", e * (mk + kn + mr + rn), e * mn),
        ]
    else:
        kernels = [
            # One read of the output gradient serves both rank-r gradients.
            KernelTraffic("grad_up_fused", e * (mn + mr + rn), e * (mr + rn)),
            # Gradients of the down-projection pair share the masked-input
            # read; the full-size input-side gradient is written once here.
            KernelTraffic("grad_down_fused", e * (mk + mr + kr), e * (kr + mk)),
            # Base input-gradient GEMM horizontally fused with the mask
            # application and adapter-path accumulation: one dX write total.
            KernelTraffic(
                "grad_base_accum_fused", e * (mn + kn + mk) + MASK_BYTES * mk, e * mk
            ),
        ]
    if multi:
        tiles = math.ceil(m / ROUTING_TILE_ROWS)
        kernels.append(KernelTraffic("adapter_routing_table", tiles * ROUTING_ENTRY_BYTES, 0))
    return kernels


def traffic(shape: GemmShape, pass_name: str, variant: str) -> TrafficReport:
    """DRAM traffic of one pass under a fixed per-variant kernel list.

    Rank 0 selects the no-adapter baseline (a plain trainable linear layer)
    regardless of variant.
    """
    if pass_name not in PASSES:
        raise ValidationError(f"pass must be one of {PASSES}, got {pass_name!r}")
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if shape.r == 0:
        kernels = _frozen_kernels(shape, pass_name)
    elif variant == "unfused":
        kernels = _unfused_kernels(shape, pass_name)
    else:
        kernels = _fused_kernels(shape, pass_name, multi=variant == "fused_multi_lora")
    return TrafficReport(variant=variant, pass_name=pass_name, kernels=tuple(kernels))


def roundtrip_bytes(shape: GemmShape, variant: str) -> int:
    """Total forward + backward DRAM bytes for one variant."""
    return traffic(shape, "forward", variant).total_bytes + traffic(shape, "backward", variant).total_bytes


def microbatch_time(tokens: int | float, params: TimeModelParams) -> float:
    """Forward seconds for a microbatch of the given (padded) token count.

    Monotone non-decreasing in tokens in both modes. Backward time is modeled
    by the caller as a multiple of this value.
    """
    if tokens < 0:
        raise ValidationError(f"tokens must be >= 0, got {tokens}")
    if params.mode == "linear":
        return params.fixed_overhead + params.per_token_cost * tokens
    hw = params.hardware
    h = params.hidden_size
    # Per decoder layer: GEMMs over ~12*h^2 weights (attention projections
    # plus a 4h MLP), weights streamed once plus activations in and out.
    layer_params = 12 * h * h
    flops = 2.0 * tokens * layer_params
    bytes_moved = params.element_bytes * (layer_params + 2.0 * tokens * h)
    per_layer = max(flops / hw.peak_flops_half, bytes_moved / hw.mem_bandwidth)
    return params.fixed_overhead + params.num_layers * per_layer


def profile_capacity(
    candidates: list[int],
    params: TimeModelParams,
    stages: int,
    *,
    backward_ratio: float = 2.0,
    num_microbatches: int = 16,
) -> int:
    """Pick the token capacity that maximizes simulated throughput.

    Each candidate is evaluated by simulating a pipeline fed with
    ``num_microbatches`` uniform microbatches of exactly that many tokens;
    ties (within 1e-9 relative) break toward the larger capacity.
    """
    if not candidates:
        raise ValidationError("candidate capacity list must be non-empty")
    if any(c < 1 for c in candidates):
        raise ValidationError("candidate capacities must be >= 1")
    from .pipesim import PipelineConfig, simulate_pipeline

    config = PipelineConfig(stage_count=stages, time_model=params, backward_ratio=backward_ratio)
    best_capacity: int | None = None
    best_tp = -math.inf
    for cap in sorted(candidates):
        result = simulate_pipeline([cap] * num_microbatches, config)
        tp = result.throughput_tokens_per_s
        if tp > best_tp or math.isclose(tp, best_tp, rel_tol=1e-9):
            best_tp = tp
            best_capacity = cap
    return best_capacity
