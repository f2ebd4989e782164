import enum
from typing import Optional, List, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    model_validator,
)

from roundpipe.math_utils import to_ns, NS_PER_SECOND
from roundpipe.serialization import hash_dictionary


class ModelConfig(BaseModel):
    """
    Transformer shape parameters of a model. E_act = E = 1 denotes a dense model.
    """

    name: str
    hidden_dim: int = Field(ge=1)
    num_heads: int = Field(ge=1)
    num_kv_heads: int = Field(ge=1)
    intermediate_dim: int = Field(ge=1)
    active_experts: int = Field(default=1, ge=1)
    total_experts: int = Field(default=1, ge=1)
    num_layers: int = Field(ge=0)
    head_flops_per_token: Optional[float] = Field(default=None, ge=0)
    head_param_bytes: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def check_shape(self) -> "ModelConfig":
        if self.num_kv_heads > self.num_heads:
            raise ValueError("num_kv_heads must not exceed num_heads")
        if self.num_heads % self.num_kv_heads != 0:
            raise ValueError("num_heads must be a multiple of num_kv_heads")
        if self.active_experts > self.total_experts:
            raise ValueError("active_experts must not exceed total_experts")
        return self

    @property
    def is_dense(self) -> bool:
        return self.active_experts == 1 and self.total_experts == 1

    @property
    def has_head_cost(self) -> bool:
        return self.head_flops_per_token is not None

    def hash(self) -> str:
        return hash_dictionary(self.model_dump(mode="json"))


class GpuSpec(BaseModel):
    """
    A GPU as seen by the cost model. link_bandwidth is per direction (the host link is full-duplex).
    """

    name: str
    peak_fp16_flops: float = Field(gt=0)
    memory_bytes: int = Field(gt=0)
    link_bandwidth: float = Field(gt=0)

    @property
    def ridge_point(self) -> float:
        """FLOPS per byte at which transfers and compute take equally long."""
        return self.peak_fp16_flops / self.link_bandwidth


class Workload(BaseModel):
    seq_len: int = Field(ge=1)
    micro_batch: int = Field(ge=1)

    @property
    def tokens(self) -> int:
        return self.seq_len * self.micro_batch


class LayerCost(BaseModel):
    """
    Cost of one layer for one micro-batch. t_bwd already contains the recomputed forward.
    """

    t_fwd: float = Field(ge=0)  # seconds
    t_bwd: float = Field(ge=0)  # seconds
    param_bytes: int = Field(default=0, ge=0)
    act_ckpt_bytes: int = Field(default=0, ge=0)
    act_full_bytes: int = Field(default=0, ge=0)
    name: Optional[str] = None

    @model_validator(mode="after")
    def check_times(self) -> "LayerCost":
        if self.t_bwd < self.t_fwd:
            raise ValueError("t_bwd must not be smaller than t_fwd")
        return self

    @property
    def fwd_ns(self) -> int:
        return to_ns(self.t_fwd)

    @property
    def bwd_ns(self) -> int:
        return to_ns(self.t_bwd)


class LayerRange(BaseModel):
    """Inclusive, 1-based range of layers."""

    model_config = ConfigDict(frozen=True)

    start: int = Field(ge=1)
    end: int = Field(ge=1)

    @model_validator(mode="after")
    def check_order(self) -> "LayerRange":
        if self.end < self.start:
            raise ValueError("a layer range must not end before it starts")
        return self

    @property
    def size(self) -> int:
        return self.end - self.start + 1

    def layers(self) -> range:
        return range(self.start, self.end + 1)

    def __str__(self):
        if self.start == self.end:
            return str(self.start)
        return f"{self.start}-{self.end}"


class StageKind(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    FUSED = "fused"
    BARRIER = "barrier"


class StagePlan(BaseModel):
    """
    Asymmetric partition: forward stages F_1..F_Sf ascending, the fused stage B_1 holding
    the last layers, and backward stages B_2..B_Sb descending over the remaining layers.
    """

    num_layers: int
    fwd_stages: List[LayerRange]
    fused_stage: LayerRange
    bwd_stages: List[LayerRange]
    t_max_ns: int
    objective_value: float = 0.0  # GPU-seconds

    @computed_field
    @property
    def S_f(self) -> int:
        return len(self.fwd_stages)

    @computed_field
    @property
    def S_b(self) -> int:
        return 1 + len(self.bwd_stages)

    @computed_field
    @property
    def S(self) -> int:
        return self.S_f + self.S_b

    @computed_field
    @property
    def t_max(self) -> float:
        return self.t_max_ns / NS_PER_SECOND

    def slots(self) -> List[Tuple[StageKind, LayerRange]]:
        """Stages in execution order: forward stages, the fused stage, then backward stages."""
        result = [(StageKind.FORWARD, r) for r in self.fwd_stages]
        result.append((StageKind.FUSED, self.fused_stage))
        result.extend((StageKind.BACKWARD, r) for r in self.bwd_stages)
        return result


class PartitionProblem(BaseModel):
    layers: List[LayerCost]
    num_gpus: int = Field(ge=1)
    num_microbatches: int = Field(ge=1)
    mem_limit_bytes: Optional[int] = Field(default=None, gt=0)
    residency_factor: float = Field(default=2.0, gt=0)

    @model_validator(mode="after")
    def check_sizes(self) -> "PartitionProblem":
        if len(self.layers) < 1:
            raise ValueError("at least one layer is required")
        if self.num_microbatches < self.num_gpus:
            raise ValueError("num_microbatches must be at least num_gpus")
        return self

    @property
    def num_layers(self) -> int:
        return len(self.layers)


class ScheduleKind(str, enum.Enum):
    ROUNDPIPE = "roundpipe"
    ROUNDPIPE_SYNC = "roundpipe-sync"
    GPIPE = "gpipe"
    ONE_F_ONE_B = "1f1b"
    INTERLEAVED_1F1B = "interleaved-1f1b"
    LOOPED_BFS = "looped-bfs"

    @property
    def is_roundpipe(self) -> bool:
        return self in (ScheduleKind.ROUNDPIPE, ScheduleKind.ROUNDPIPE_SYNC)

    @property
    def is_async(self) -> bool:
        return self == ScheduleKind.ROUNDPIPE


class StageSlot(BaseModel):
    """
    One position in the concatenated forward-then-backward stage sequence of an iteration.
    """

    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=0)
    kind: StageKind
    layer_range: Optional[LayerRange] = None
    round: int = 0
    iteration: int = 0


class Task(BaseModel):
    model_config = ConfigDict(frozen=True)

    slot: StageSlot
    microbatch: int = Field(ge=0)
    gpu: Optional[int] = None  # None for flush barriers

    @property
    def is_barrier(self) -> bool:
        return self.slot.kind == StageKind.BARRIER


class ScheduleSpec(BaseModel):
    kind: ScheduleKind
    num_gpus: int = Field(ge=1)
    num_microbatches: int = Field(ge=1)
    round_size: Optional[int] = Field(default=None, ge=1)
    iterations: int = Field(default=1, ge=1)
    start_gpu: int = Field(default=0, ge=0)
    plan: Optional[StagePlan] = None
    # symmetric partition shared by forward and backward, len == stages_per_gpu * num_gpus
    stages: Optional[List[LayerRange]] = None
    stages_per_gpu: int = Field(default=1, ge=1)


class TimedEvent(BaseModel):
    task: Task
    start_ns: int
    end_ns: int

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns


class GpuBusy(BaseModel):
    id: int
    busy_ns: int


class SimReport(BaseModel):
    schedule: ScheduleKind
    num_gpus: int
    makespan_ns: int
    gpus: List[GpuBusy]
    bubble_ratio: float
    window_ns: int  # length of the interval the bubble is measured over
    events: List[TimedEvent]

    def to_report(self) -> dict:
        return {
            "makespan_ns": self.makespan_ns,
            "gpus": [g.model_dump() for g in self.gpus],
            "bubble_ratio": self.bubble_ratio,
            "events": [
                {
                    "iter": e.task.slot.iteration,
                    "slot": e.task.slot.index,
                    "mb": e.task.microbatch,
                    "gpu": e.task.gpu,
                    "start_ns": e.start_ns,
                    "end_ns": e.end_ns,
                    "kind": e.task.slot.kind.value,
                }
                for e in self.events
            ],
        }


class TransferDirection(str, enum.Enum):
    UPLOAD = "upload"
    DOWNLOAD = "download"


class TransferItem(BaseModel):
    model_config = ConfigDict(frozen=True)

    tensor_id: str
    bytes: int = Field(gt=0)
    direction: TransferDirection = TransferDirection.UPLOAD
    chunk_index: int = Field(default=0, ge=0)


class WindowAssignment(BaseModel):
    id: int
    items: List[TransferItem] = []

    @computed_field
    @property
    def total_bytes(self) -> int:
        return sum(item.bytes for item in self.items)


class TransferPlan(BaseModel):
    windows: List[WindowAssignment]

    @property
    def makespan_bytes(self) -> int:
        return max((w.total_bytes for w in self.windows), default=0)

    def to_report(self) -> dict:
        return {
            "windows": [
                {
                    "id": w.id,
                    "bytes": w.total_bytes,
                    "items": [item.model_dump(mode="json") for item in w.items],
                }
                for w in self.windows
            ],
            "makespan_bytes": self.makespan_bytes,
        }


class WindowVerdict(BaseModel):
    stage_index: int
    kind: StageKind
    layer_range: LayerRange
    window_ns: int
    upload_bytes: int
    download_bytes: int
    activation_bytes: int
    params_feasible: bool
    activations_feasible: bool

    @computed_field
    @property
    def feasible(self) -> bool:
        return self.params_feasible and self.activations_feasible


class ActorKind(str, enum.Enum):
    GPU_WORKER = "gpu-worker"
    OPTIMIZER_WORKER = "optimizer-worker"


class ActionKind(str, enum.Enum):
    PARAM_UPLOAD = "param_upload"
    GRAD_WRITE = "grad_write"
    P_COPY = "p_copy"
    G_COPY = "g_copy"
    OPT_STEP = "opt_step"

    @property
    def actor(self) -> ActorKind:
        if self in (ActionKind.PARAM_UPLOAD, ActionKind.GRAD_WRITE):
            return ActorKind.GPU_WORKER
        return ActorKind.OPTIMIZER_WORKER


class ProtocolMode(str, enum.Enum):
    BLOCKING = "blocking"
    EVENT_PER_MODEL = "event-per-model"
    EVENT_PER_LAYER = "event-per-layer"


class ProtocolAction(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ActionKind
    layer: int = Field(ge=1)
    iteration: int = Field(ge=0)

    @computed_field
    @property
    def actor(self) -> ActorKind:
        return self.kind.actor

    def __str__(self):
        return f"{self.kind.value}(layer={self.layer}, T={self.iteration})"


class DependencyEdge(BaseModel):
    model_config = ConfigDict(frozen=True)

    src: ProtocolAction
    dst: ProtocolAction
    constraint: Optional[int] = Field(default=None, ge=1, le=4)
    reason: str = "constraint"


class DependencyGraph(BaseModel):
    mode: ProtocolMode
    num_layers: int
    iterations: int
    actions: List[ProtocolAction]
    edges: List[DependencyEdge]

    def constraint_edges(self, constraint: Optional[int] = None) -> List[DependencyEdge]:
        return [
            e
            for e in self.edges
            if e.constraint is not None
            and (constraint is None or e.constraint == constraint)
        ]


class Verdict(BaseModel):
    ok: bool
    constraint: Optional[int] = None
    witness: List[ProtocolAction] = []
    states_explored: int = 0


class ProtocolTimings(BaseModel):
    """Duration of one action of each kind, in nanoseconds."""

    param_upload_ns: int = Field(default=10, ge=0)
    grad_write_ns: int = Field(default=10, ge=0)
    p_copy_ns: int = Field(default=1, ge=0)
    g_copy_ns: int = Field(default=1, ge=0)
    opt_step_ns: int = Field(default=2, ge=0)

    def duration(self, kind: ActionKind) -> int:
        return getattr(self, f"{kind.value}_ns")


class TimedAction(BaseModel):
    action: ProtocolAction
    start_ns: int
    end_ns: int


class ProtocolRun(BaseModel):
    mode: ProtocolMode
    makespan_ns: int
    actions: List[TimedAction]

    def start_of(self, kind: ActionKind, layer: int, iteration: int) -> int:
        for timed in self.actions:
            action = timed.action
            if (action.kind, action.layer, action.iteration) == (kind, layer, iteration):
                return timed.start_ns
        raise KeyError(f"no {kind.value} action for layer {layer}, iteration {iteration}")


class ConfigReferenceType(str, enum.Enum):
    NAME = "name"
    FILE = "file"


class ConfigReference(BaseModel):
    reference: str
    type: ConfigReferenceType


class HeadMode(str, enum.Enum):
    NONE = "none"
    LAYER = "layer"
    CONFIG = "config"


class RunConfig(BaseModel):
    """
    Everything one simulation run needs. model and gpu are bundled names or JSON file paths.
    """

    model: str
    gpu: str
    seq_len: int = Field(default=2048, ge=1)
    micro_batch: int = Field(default=4, ge=1)
    schedule: ScheduleKind = ScheduleKind.ROUNDPIPE
    num_gpus: int = Field(default=8, ge=1)
    num_microbatches: int = Field(default=16, ge=1)
    round_size: Optional[int] = Field(default=None, ge=1)
    iterations: int = Field(default=3, ge=1)
    stages_per_gpu: int = Field(default=2, ge=1)
    head: HeadMode = HeadMode.LAYER
    layer_times: Optional[str] = None
    mem_limit_bytes: Optional[int] = Field(default=None, gt=0)
    residency_factor: float = Field(default=2.0, gt=0)
    optimizer_delay_ns: int = Field(default=0, ge=0)
    json_path: Optional[str] = None
    csv_path: Optional[str] = None
    svg_path: Optional[str] = None

    def hash(self) -> str:
        # output paths do not change the result
        return hash_dictionary(
            self.model_dump(mode="json", exclude={"json_path", "csv_path", "svg_path"})
        )
