import logging
from collections import defaultdict
from typing import Dict, List, Optional, Type

from roundpipe.interfaces import ScheduleGeneratorInterface, InvalidScheduleError
from roundpipe.models import (
    LayerCost,
    ScheduleKind,
    ScheduleSpec,
    StagePlan,
    Task,
)
from roundpipe.scheduler.baselines import (
    GPipeSchedule,
    OneFOneBSchedule,
    InterleavedOneFOneBSchedule,
    LoopedBFSSchedule,
    backward_slot_index,
)
from roundpipe.scheduler.common import (
    ScheduleViolation,
    ViolationKind,
    default_round_size,
    symmetric_partition,
)
from roundpipe.scheduler.roundpipe import (
    RoundPipeSchedule,
    RoundPipeSyncSchedule,
    resolve_round_size,
)

logger = logging.getLogger(__name__)

AVAILABLE_SCHEDULES: Dict[ScheduleKind, Type[ScheduleGeneratorInterface]] = {
    ScheduleKind.ROUNDPIPE: RoundPipeSchedule,
    ScheduleKind.ROUNDPIPE_SYNC: RoundPipeSyncSchedule,
    ScheduleKind.GPIPE: GPipeSchedule,
    ScheduleKind.ONE_F_ONE_B: OneFOneBSchedule,
    ScheduleKind.INTERLEAVED_1F1B: InterleavedOneFOneBSchedule,
    ScheduleKind.LOOPED_BFS: LoopedBFSSchedule,
}

# chunks per GPU for baselines that bind a single stage to each GPU
SINGLE_STAGE_BASELINES = (ScheduleKind.GPIPE, ScheduleKind.ONE_F_ONE_B)


def synthesize(spec: ScheduleSpec) -> List[Task]:
    """
    Emit the ordered task list of a schedule.
    :param spec: schedule spec
    :return: tasks; each GPU runs its tasks in list order
    :raises InvalidScheduleError: if the ScheduleSpec violates the schedule's preconditions
    """
    return AVAILABLE_SCHEDULES[spec.kind]()(spec)


def roundpipe_spec(
    plan: StagePlan,
    num_gpus: int,
    num_microbatches: int,
    asynchronous: bool = True,
    iterations: int = 1,
    round_size: Optional[int] = None,
) -> ScheduleSpec:
    return ScheduleSpec(
        kind=ScheduleKind.ROUNDPIPE if asynchronous else ScheduleKind.ROUNDPIPE_SYNC,
        num_gpus=num_gpus,
        num_microbatches=num_microbatches,
        round_size=round_size,
        iterations=iterations,
        plan=plan,
    )


def baseline_spec(
    kind: ScheduleKind,
    costs: List[LayerCost],
    num_gpus: int,
    num_microbatches: int,
    stages_per_gpu: int = 2,
    iterations: int = 1,
) -> ScheduleSpec:
    """
    Spec of a baseline schedule over a symmetric min-max partition of the layers.
    GPipe and 1F1B always use one stage per GPU.
    """
    if kind.is_roundpipe:
        raise InvalidScheduleError(f"{kind.value} is not a baseline schedule")
    if kind in SINGLE_STAGE_BASELINES:
        stages_per_gpu = 1
    stages = symmetric_partition(costs, stages_per_gpu * num_gpus)
    return ScheduleSpec(
        kind=kind,
        num_gpus=num_gpus,
        num_microbatches=num_microbatches,
        iterations=iterations,
        stages=stages,
        stages_per_gpu=stages_per_gpu,
    )


def num_slots(spec: ScheduleSpec) -> int:
    return AVAILABLE_SCHEDULES[spec.kind]().num_slots(spec)


def expected_gpu(spec: ScheduleSpec, task: Task) -> int:
    n = spec.num_gpus
    if spec.kind.is_roundpipe:
        num_rounds = spec.num_microbatches // resolve_round_size(spec)
        global_round = task.slot.iteration * num_rounds + task.slot.round
        g0 = (spec.start_gpu + global_round * spec.plan.S) % n
        return (g0 + task.slot.index) % n
    num_stages = len(spec.stages)
    stage = task.slot.index
    if stage >= num_stages:
        stage = backward_slot_index(stage, num_stages)
    return stage % n


def validate(tasks: List[Task], spec: ScheduleSpec) -> List[ScheduleViolation]:
    """
    Check GPU assignment, coverage, uniqueness and per-GPU ordering of a task list.
    :param tasks: task list in dispatch order
    :param spec: schedule spec
    :return: violations, empty if the task list is valid
    """
    violations = []
    # key -> (gpu, position in that GPU's queue)
    placed: Dict[tuple, tuple] = {}
    queue_length: Dict[int, int] = defaultdict(int)
    for task in tasks:
        if task.is_barrier:
            continue
        key = (task.slot.iteration, task.slot.index, task.microbatch)
        if key in placed:
            violations.append(
                ScheduleViolation(
                    kind=ViolationKind.DUPLICATE,
                    message=f"task {key} appears more than once",
                    task=task,
                )
            )
            continue
        placed[key] = (task.gpu, queue_length[task.gpu])
        queue_length[task.gpu] += 1
        expected = expected_gpu(spec, task)
        if task.gpu != expected:
            violations.append(
                ScheduleViolation(
                    kind=ViolationKind.GPU,
                    message=f"task {key} runs on GPU {task.gpu}, expected {expected}",
                    task=task,
                )
            )

    for task in tasks:
        if task.is_barrier or task.slot.index == 0:
            continue
        key = (task.slot.iteration, task.slot.index, task.microbatch)
        predecessor = (task.slot.iteration, task.slot.index - 1, task.microbatch)
        if predecessor not in placed:
            continue
        gpu, position = placed[key]
        predecessor_gpu, predecessor_position = placed[predecessor]
        if gpu == predecessor_gpu and predecessor_position > position:
            violations.append(
                ScheduleViolation(
                    kind=ViolationKind.ORDERING,
                    message=f"task {key} is queued before its predecessor on GPU {gpu}",
                    task=task,
                )
            )

    if spec.kind.is_roundpipe:
        # a GPU finishes all micro-batches of a slot before it moves on to its next slot
        last_group: Dict[int, tuple] = {}
        for task in tasks:
            if task.is_barrier:
                continue
            group = (task.slot.iteration, task.slot.round, task.slot.index)
            previous = last_group.get(task.gpu)
            if previous is not None and group < previous:
                violations.append(
                    ScheduleViolation(
                        kind=ViolationKind.ORDERING,
                        message=f"GPU {task.gpu} returns to slot {group} after {previous}",
                        task=task,
                    )
                )
            else:
                last_group[task.gpu] = group

    slots = num_slots(spec)
    for iteration in range(spec.iterations):
        for index in range(slots):
            for microbatch in range(spec.num_microbatches):
                if (iteration, index, microbatch) not in placed:
                    violations.append(
                        ScheduleViolation(
                            kind=ViolationKind.COVERAGE,
                            message=f"task {(iteration, index, microbatch)} is missing",
                        )
                    )
    if violations:
        logger.warning(f"{len(violations)} schedule violations in {spec.kind.value}")
    return violations


__all__ = [
    "AVAILABLE_SCHEDULES",
    "InvalidScheduleError",
    "SINGLE_STAGE_BASELINES",
    "ScheduleViolation",
    "ViolationKind",
    "baseline_spec",
    "default_round_size",
    "expected_gpu",
    "num_slots",
    "roundpipe_spec",
    "synthesize",
    "validate",
]
