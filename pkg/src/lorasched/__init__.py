"""Scheduler and simulator for concurrent multi-adapter LoRA fine-tuning.

Core pieces: workload modeling, adapter grouping, capacity-bounded microbatch
packing (greedy plus an exact two-stage solver), pipeline-safe schedule
assembly, a 1F1B pipeline simulator, and analytic kernel cost models. An HTTP
service wraps the pipeline; the CLI is a thin client of that service.
"""

__version__ = "0.1.0"

from .costmodel import (
    GemmShape,
    HardwareProfile,
    TimeModelParams,
    TrafficReport,
    arithmetic_intensity,
    down_projection_intensity,
    lora_memory_bytes,
    microbatch_time,
    profile_capacity,
    traffic,
)
from .errors import (
    InfeasibleBinCountError,
    ParseError,
    SchedulerError,
    SolverError,
    UnpackableSampleError,
    ValidationError,
)
from .grouping import AdapterGroup, GroupingPlan, group_adapters
from .packing import (
    Microbatch,
    MicrobatchSegment,
    PackingResult,
    SolverBudget,
    greedy_pack,
    milp_min_bins,
    milp_min_smallest_bin,
    pack_all,
    pack_global_batch,
)
from .pipesim import (
    PipelineConfig,
    Policy,
    SimResult,
    compare_policies,
    simulate_dp,
    simulate_pipeline,
)
from .schedule import (
    Schedule,
    ScheduleEntry,
    build_schedule,
    check_bubble_lemma,
    merge_pass,
    schedule_from_doc,
    schedule_to_doc,
    verify_and_fix,
)
from .workload import (
    AdapterSpec,
    DatasetStats,
    LengthComponent,
    LengthDistributionSpec,
    SampleRecord,
    assign_global_batches,
    compute_stats,
    load_samples,
    save_samples,
    synthesize_dataset,
)
