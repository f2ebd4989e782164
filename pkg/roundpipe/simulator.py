"""
Discrete-event execution of a task list.

Every GPU runs its tasks in list order. A task starts once the GPU is free and its dependencies finished:
the same micro-batch's previous slot, the flush barrier of the previous iteration (synchronous schedules)
and, with an optimizer delay, the optimizer step of its layers two iterations earlier.
"""
import heapq
import logging
from collections import defaultdict
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from roundpipe.config_loader import load_gpu_spec, load_model_config
from roundpipe.cost_model import layer_costs, load_layer_costs
from roundpipe.math_utils import NS_PER_SECOND
from roundpipe.models import (
    GpuBusy,
    GpuSpec,
    LayerCost,
    PartitionProblem,
    RunConfig,
    ScheduleKind,
    ScheduleSpec,
    SimReport,
    StageKind,
    StagePlan,
    Task,
    TimedEvent,
    TransferDirection,
    TransferItem,
    WindowVerdict,
    Workload,
)
from roundpipe.partitioner import optimal_partition, stage_time_ns
from roundpipe.scheduler import (
    SINGLE_STAGE_BASELINES,
    baseline_spec,
    roundpipe_spec,
    synthesize,
)
from roundpipe.transfer_planner import plan as plan_transfers

logger = logging.getLogger(__name__)

# resource key of the CPU optimizer worker
OPTIMIZER = "optimizer"

# forwards of iteration T read the weights written by the optimizer step of iteration T - STALENESS
STALENESS = 2


class DependencyCycleError(Exception):
    pass


class SimulationOptions(BaseModel):
    # optimizer time per layer, only used by the asynchronous schedule
    optimizer_delay_ns: int = Field(default=0, ge=0)


class _Node:
    __slots__ = ("task", "resource", "duration", "successors", "unmet", "ready_at", "tie")

    def __init__(self, task, resource, duration, tie):
        self.task = task
        self.resource = resource
        self.duration = duration
        self.successors = []
        self.unmet = 0
        self.ready_at = 0
        self.tie = tie


def _link(src: _Node, dst: _Node):
    src.successors.append(dst)
    dst.unmet += 1


def _tie_key(task: Task) -> Tuple[int, int, int]:
    return (task.slot.iteration, task.slot.index, task.microbatch)


def _build_graph(
    tasks: List[Task],
    costs: List[LayerCost],
    spec: ScheduleSpec,
    options: SimulationOptions,
) -> List[_Node]:
    durations: Dict[tuple, int] = {}
    nodes = []
    by_key: Dict[tuple, _Node] = {}
    barriers: Dict[int, _Node] = {}
    for task in tasks:
        if task.is_barrier:
            node = _Node(task, None, 0, _tie_key(task))
            barriers[task.slot.iteration] = node
        else:
            cache_key = (task.slot.kind, task.slot.layer_range)
            if cache_key not in durations:
                durations[cache_key] = stage_time_ns(
                    task.slot.kind, task.slot.layer_range, costs
                )
            node = _Node(task, task.gpu, durations[cache_key], _tie_key(task))
            by_key[(task.slot.iteration, task.slot.round, task.slot.index, task.microbatch)] = node
        nodes.append(node)

    # program order on every GPU
    last_on_gpu: Dict[int, _Node] = {}
    for node in nodes:
        if node.resource is None:
            continue
        if node.resource in last_on_gpu:
            _link(last_on_gpu[node.resource], node)
        last_on_gpu[node.resource] = node

    for (iteration, round_, index, microbatch), node in by_key.items():
        if index > 0:
            predecessor = by_key.get((iteration, round_, index - 1, microbatch))
            if predecessor is None:
                raise DependencyCycleError(
                    f"task {(iteration, index, microbatch)} has no predecessor slot"
                )
            _link(predecessor, node)
        elif iteration - 1 in barriers:
            _link(barriers[iteration - 1], node)
        if node.task.slot.iteration in barriers:
            _link(node, barriers[node.task.slot.iteration])

    if options.optimizer_delay_ns > 0 and spec.kind.is_async:
        nodes.extend(_optimizer_nodes(by_key, spec, options))
    elif options.optimizer_delay_ns > 0:
        logger.warning(
            f"Optimizer delay is only modelled for the asynchronous schedule, ignored for {spec.kind.value}"
        )
    return nodes


def _optimizer_nodes(
    by_key: Dict[tuple, _Node], spec: ScheduleSpec, options: SimulationOptions
) -> List[_Node]:
    """
    A sequential optimizer worker steps the layers of an iteration from the last layer down, each step waiting
    for all backward work on that layer. Forwards two iterations later wait for the step of their layers.
    """
    num_layers = spec.plan.num_layers
    backward_of: Dict[Tuple[int, int], List[_Node]] = defaultdict(list)
    forward_of: Dict[Tuple[int, int], List[_Node]] = defaultdict(list)
    for node in by_key.values():
        slot = node.task.slot
        for layer in slot.layer_range.layers():
            if slot.kind in (StageKind.BACKWARD, StageKind.FUSED):
                backward_of[(slot.iteration, layer)].append(node)
            if slot.kind in (StageKind.FORWARD, StageKind.FUSED):
                forward_of[(slot.iteration, layer)].append(node)

    optimizer_nodes = []
    previous = None
    for iteration in range(spec.iterations - STALENESS):
        for layer in range(num_layers, 0, -1):
            step = _Node(None, OPTIMIZER, options.optimizer_delay_ns, (iteration, -layer, 0))
            for node in backward_of[(iteration, layer)]:
                _link(node, step)
            for node in forward_of[(iteration + STALENESS, layer)]:
                _link(step, node)
            if previous is not None:
                _link(previous, step)
            previous = step
            optimizer_nodes.append(step)
    return optimizer_nodes


def _run(nodes: List[_Node]) -> Dict[int, Tuple[int, int]]:
    """
    Start every node as soon as all of its predecessors finished. Returns start and end per node id.
    """
    times: Dict[int, Tuple[int, int]] = {}
    heap = []
    for node in nodes:
        if node.unmet == 0:
            heapq.heappush(heap, (0, node.tie, id(node), node))
    while heap:
        start, _, _, node = heapq.heappop(heap)
        end = start + node.duration
        times[id(node)] = (start, end)
        for successor in node.successors:
            successor.unmet -= 1
            successor.ready_at = max(successor.ready_at, end)
            if successor.unmet == 0:
                heapq.heappush(
                    heap, (successor.ready_at, successor.tie, id(successor), successor)
                )
    if len(times) != len(nodes):
        raise DependencyCycleError(
            f"{len(nodes) - len(times)} tasks can never start (dependency cycle)"
        )
    return times


def _iteration_spans(events: List[TimedEvent]) -> Dict[int, Tuple[int, int]]:
    spans = {}
    for event in events:
        iteration = event.task.slot.iteration
        start, end = spans.get(iteration, (event.start_ns, event.end_ns))
        spans[iteration] = (min(start, event.start_ns), max(end, event.end_ns))
    return spans


def _bubble(
    events: List[TimedEvent], spec: ScheduleSpec, makespan: int
) -> Tuple[float, int]:
    """
    Idle share of GPU time. Synchronous schedules add up the span of every iteration; the asynchronous
    schedule is measured in steady state, over the interior iterations 1..I-2.
    """
    n = spec.num_gpus
    if not events:
        return 0.0, 0
    starts = np.array([e.start_ns for e in events], dtype=np.int64)
    ends = np.array([e.end_ns for e in events], dtype=np.int64)
    spans = _iteration_spans(events)

    if spec.kind.is_async:
        if spec.iterations >= 3:
            interior = range(1, spec.iterations - 1)
            window_start = min(spans[i][0] for i in interior)
            window_end = max(spans[i][1] for i in interior)
        else:
            logger.warning(
                "Asynchronous run with fewer than 3 iterations has no steady state, measuring the whole run"
            )
            window_start, window_end = 0, makespan
        window = window_end - window_start
        clipped = np.clip(ends, window_start, window_end) - np.clip(
            starts, window_start, window_end
        )
        busy = int(clipped.sum())
    else:
        window = sum(end - start for start, end in spans.values())
        busy = int((ends - starts).sum())

    if window == 0:
        return 0.0, 0
    return 1 - busy / (n * window), window


def simulate(
    tasks: List[Task],
    costs: List[LayerCost],
    spec: ScheduleSpec,
    options: Optional[SimulationOptions] = None,
) -> SimReport:
    """
    Execute a task list and measure the timeline.
    :param tasks: task list from the scheduler
    :param costs: per-layer costs, rounded to integer nanoseconds once per layer
    :param spec: ScheduleSpec the tasks were synthesized from
    :param options: simulation options
    :return: SimReport with events ordered by start time
    :raises DependencyCycleError: if the task list cannot be executed
    """
    options = options or SimulationOptions()
    nodes = _build_graph(tasks, costs, spec, options)
    times = _run(nodes)

    events = []
    for node in nodes:
        if node.task is None or node.task.is_barrier:
            continue
        start, end = times[id(node)]
        events.append(TimedEvent(task=node.task, start_ns=start, end_ns=end))
    events.sort(key=lambda e: (e.start_ns, _tie_key(e.task), e.task.gpu))

    makespan = max((t[1] for t in times.values()), default=0)
    busy = np.zeros(spec.num_gpus, dtype=np.int64)
    for event in events:
        busy[event.task.gpu] += event.duration_ns
    bubble_ratio, window = _bubble(events, spec, makespan)
    report = SimReport(
        schedule=spec.kind,
        num_gpus=spec.num_gpus,
        makespan_ns=makespan,
        gpus=[GpuBusy(id=g, busy_ns=int(busy[g])) for g in range(spec.num_gpus)],
        bubble_ratio=bubble_ratio,
        window_ns=window,
        events=events,
    )
    logger.info(
        f"{spec.kind.value}: makespan {makespan}ns, bubble {bubble_ratio:.4f} on {spec.num_gpus} GPUs"
    )
    return report


def closed_form_bubble(
    kind: ScheduleKind, num_gpus: int, num_microbatches: int, num_stages: int
) -> float:
    """
    Analytic bubble for uniform stage times: (S - 1) / (M + S - 1) for GPipe and 1F1B,
    N (N - 1) / (M S + N (N - 1)) for looped schedules and RoundPipe.
    Interleaved 1F1B uses the looped formula for its v = S / N chunks per GPU.
    """
    n, m, s = num_gpus, num_microbatches, num_stages
    if kind in (ScheduleKind.GPIPE, ScheduleKind.ONE_F_ONE_B):
        return (s - 1) / (m + s - 1)
    return n * (n - 1) / (m * s + n * (n - 1))


def _layer_items(
    costs: List[LayerCost], layers: range, direction: TransferDirection
) -> List[TransferItem]:
    return [
        TransferItem(
            tensor_id=costs[layer - 1].name or f"layer{layer}",
            bytes=costs[layer - 1].param_bytes,
            direction=direction,
        )
        for layer in layers
        if costs[layer - 1].param_bytes > 0
    ]


def transfer_feasibility(
    plan: StagePlan,
    costs: List[LayerCost],
    gpu: GpuSpec,
    num_microbatches: int,
    window_offset: int = 1,
) -> List[WindowVerdict]:
    """
    Check that parameter and gradient transfers fit into the per-micro-batch windows of every stage.
    Windows of slot k carry the parameter upload of slot k + window_offset (wrapping around) and the
    gradient download of slot k itself. Activations are checked separately per window.
    :param plan: stage plan
    :param costs: per-layer costs
    :param gpu: gpu spec, link_bandwidth per direction
    :param num_microbatches: windows per stage
    :param window_offset: 1 prefetches the next stage, 0 uploads a stage in its own windows
    :return: one verdict per stage slot
    """
    slots = plan.slots()
    verdicts = []
    for index, (kind, layer_range) in enumerate(slots):
        window_ns = stage_time_ns(kind, layer_range, costs)
        _, upload_range = slots[(index + window_offset) % len(slots)]
        uploads = _layer_items(costs, upload_range.layers(), TransferDirection.UPLOAD)
        downloads = []
        if kind != StageKind.FORWARD:
            downloads = _layer_items(
                costs, layer_range.layers(), TransferDirection.DOWNLOAD
            )
        upload_bytes = (
            plan_transfers(uploads, num_microbatches).makespan_bytes if uploads else 0
        )
        download_bytes = (
            plan_transfers(downloads, num_microbatches).makespan_bytes
            if downloads
            else 0
        )
        activation_bytes = 2 * costs[layer_range.start - 1].act_ckpt_bytes
        window_s = window_ns / NS_PER_SECOND
        params_feasible = (
            max(upload_bytes, download_bytes) / gpu.link_bandwidth <= window_s
        )
        activations_feasible = activation_bytes / gpu.link_bandwidth <= window_s
        verdicts.append(
            WindowVerdict(
                stage_index=index,
                kind=kind,
                layer_range=layer_range,
                window_ns=window_ns,
                upload_bytes=upload_bytes,
                download_bytes=download_bytes,
                activation_bytes=activation_bytes,
                params_feasible=params_feasible,
                activations_feasible=activations_feasible,
            )
        )
    infeasible = [v.stage_index for v in verdicts if not v.feasible]
    if infeasible:
        logger.info(f"Transfer windows infeasible for stages {infeasible}")
    return verdicts


class ComparisonRow(BaseModel):
    model: str
    schedule: ScheduleKind
    num_stages: int
    makespan_ns: int
    bubble_ratio: float
    # analytic bubble for uniform stages; the asynchronous schedule has none
    closed_form: Optional[float] = None


class ScheduleRun(BaseModel):
    spec: ScheduleSpec
    report: SimReport

    @property
    def num_stages(self) -> int:
        if self.spec.plan is not None:
            return self.spec.plan.S
        return len(self.spec.stages)


def run_schedule(
    kind: ScheduleKind,
    costs: List[LayerCost],
    num_gpus: int,
    num_microbatches: int,
    iterations: int = 3,
    stages_per_gpu: Optional[int] = 2,
    round_size: Optional[int] = None,
    mem_limit_bytes: Optional[int] = None,
    residency_factor: float = 2.0,
    options: Optional[SimulationOptions] = None,
) -> ScheduleRun:
    """
    Partition, synthesize and simulate one schedule over shared layer costs.
    RoundPipe schedules use the optimal asymmetric partition, baselines a symmetric one.
    With stages_per_gpu None, multi-stage baselines search for their best stage count.
    """
    if kind.is_roundpipe:
        plan = optimal_partition(
            PartitionProblem(
                layers=costs,
                num_gpus=num_gpus,
                num_microbatches=num_microbatches,
                mem_limit_bytes=mem_limit_bytes,
                residency_factor=residency_factor,
            )
        )
        spec = roundpipe_spec(
            plan,
            num_gpus,
            num_microbatches,
            asynchronous=kind.is_async,
            iterations=iterations,
            round_size=round_size,
        )
    elif stages_per_gpu is None and kind not in SINGLE_STAGE_BASELINES:
        return _best_baseline_run(
            kind, costs, num_gpus, num_microbatches, iterations, options
        )
    else:
        stages_per_gpu = stages_per_gpu or 1
        if kind not in SINGLE_STAGE_BASELINES and len(costs) < stages_per_gpu * num_gpus:
            reduced = max(1, len(costs) // num_gpus)
            logger.warning(
                f"{len(costs)} layers cannot fill {stages_per_gpu * num_gpus} stages, "
                f"{kind.value} uses {reduced} stage(s) per GPU"
            )
            stages_per_gpu = reduced
        spec = baseline_spec(
            kind,
            costs,
            num_gpus,
            num_microbatches,
            stages_per_gpu=stages_per_gpu,
            iterations=iterations,
        )
    tasks = synthesize(spec)
    return ScheduleRun(spec=spec, report=simulate(tasks, costs, spec, options))


def _best_baseline_run(
    kind: ScheduleKind,
    costs: List[LayerCost],
    num_gpus: int,
    num_microbatches: int,
    iterations: int,
    options: Optional[SimulationOptions],
) -> ScheduleRun:
    """
    Try every stages-per-GPU count the layers allow and keep the run with the lowest bubble,
    the fewest stages on ties.
    """
    best = None
    for stages_per_gpu in range(1, max(1, len(costs) // num_gpus) + 1):
        spec = baseline_spec(
            kind,
            costs,
            num_gpus,
            num_microbatches,
            stages_per_gpu=stages_per_gpu,
            iterations=iterations,
        )
        run = ScheduleRun(spec=spec, report=simulate(synthesize(spec), costs, spec, options))
        logger.debug(
            f"{kind.value} with {stages_per_gpu} stage(s) per GPU: bubble {run.report.bubble_ratio:.4f}"
        )
        if best is None or run.report.bubble_ratio < best.report.bubble_ratio:
            best = run
    logger.info(f"{kind.value} runs best with {best.num_stages // num_gpus} stage(s) per GPU")
    return best


def compare_runs(
    model: str,
    costs: List[LayerCost],
    schedules: Optional[List[ScheduleKind]] = None,
    num_gpus: int = 8,
    num_microbatches: int = 16,
    iterations: int = 3,
    stages_per_gpu: Optional[int] = None,
    options: Optional[SimulationOptions] = None,
) -> List[Tuple[ComparisonRow, ScheduleRun]]:
    """
    Simulate several schedules over the same layer costs.
    :param model: label of the rows
    :param costs: per-layer costs shared by all schedules
    :param schedules: schedule kinds, all of them by default
    :param stages_per_gpu: stages per GPU of the looped baselines, None picks the best per schedule
    :return: one row and its run per schedule, in the given order
    """
    results = []
    for kind in schedules or list(ScheduleKind):
        run = run_schedule(
            kind,
            costs,
            num_gpus,
            num_microbatches,
            iterations=iterations,
            stages_per_gpu=stages_per_gpu,
            options=options,
        )
        closed_form = None
        if not kind.is_async:
            closed_form = closed_form_bubble(
                kind, num_gpus, num_microbatches, run.num_stages
            )
        row = ComparisonRow(
            model=model,
            schedule=kind,
            num_stages=run.num_stages,
            makespan_ns=run.report.makespan_ns,
            bubble_ratio=run.report.bubble_ratio,
            closed_form=closed_form,
        )
        results.append((row, run))
    return results


def compare(
    model: str,
    costs: List[LayerCost],
    schedules: Optional[List[ScheduleKind]] = None,
    num_gpus: int = 8,
    num_microbatches: int = 16,
    iterations: int = 3,
    stages_per_gpu: Optional[int] = None,
    options: Optional[SimulationOptions] = None,
) -> List[ComparisonRow]:
    return [
        row
        for row, _ in compare_runs(
            model,
            costs,
            schedules,
            num_gpus,
            num_microbatches,
            iterations,
            stages_per_gpu,
            options,
        )
    ]


def costs_for_run(run: RunConfig) -> List[LayerCost]:
    """Measured layer costs if the run names a file, synthetic costs from the model and GPU otherwise."""
    if run.layer_times:
        return load_layer_costs(run.layer_times)
    return layer_costs(
        load_model_config(run.model),
        Workload(seq_len=run.seq_len, micro_batch=run.micro_batch),
        load_gpu_spec(run.gpu),
        head=run.head,
    )


def simulate_run(run: RunConfig) -> ScheduleRun:
    return run_schedule(
        run.schedule,
        costs_for_run(run),
        run.num_gpus,
        run.num_microbatches,
        iterations=run.iterations,
        stages_per_gpu=run.stages_per_gpu,
        round_size=run.round_size,
        mem_limit_bytes=run.mem_limit_bytes,
        residency_factor=run.residency_factor,
        options=SimulationOptions(optimizer_delay_ns=run.optimizer_delay_ns),
    )
