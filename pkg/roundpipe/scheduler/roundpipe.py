import logging
from typing import List

from roundpipe.interfaces import ScheduleGeneratorInterface, InvalidScheduleError
from roundpipe.models import ScheduleKind, ScheduleSpec, StageSlot, Task
from roundpipe.scheduler.common import barrier_task, default_round_size

logger = logging.getLogger(__name__)


def resolve_round_size(spec: ScheduleSpec) -> int:
    if spec.round_size is not None:
        return spec.round_size
    return default_round_size(spec.num_microbatches, spec.num_gpus, spec.plan.S)


class RoundPipeSyncSchedule(ScheduleGeneratorInterface):
    """
    Round-robin dispatch of an asymmetric stage plan: slot i of a round runs all M_R micro-batches
    on GPU (g0 + i) mod N, and g0 advances by S after every round. Iterations are separated by a flush.
    """

    kind = ScheduleKind.ROUNDPIPE_SYNC
    flushes = True

    def check(self, spec: ScheduleSpec):
        super().check(spec)
        if spec.plan is None:
            raise InvalidScheduleError(f"{spec.kind.value} needs a stage plan")
        round_size = resolve_round_size(spec)
        if round_size < spec.num_gpus:
            raise InvalidScheduleError(
                f"Round size {round_size} is smaller than the GPU count {spec.num_gpus}"
            )
        if spec.num_microbatches % round_size != 0:
            raise InvalidScheduleError(
                f"{spec.num_microbatches} micro-batches do not split into rounds of {round_size}"
            )

    def num_slots(self, spec: ScheduleSpec) -> int:
        return spec.plan.S

    def generate(self, spec: ScheduleSpec) -> List[Task]:
        n = spec.num_gpus
        round_size = resolve_round_size(spec)
        num_rounds = spec.num_microbatches // round_size
        slots = spec.plan.slots()
        num_slots = len(slots)
        g0 = spec.start_gpu % n
        tasks = []
        for iteration in range(spec.iterations):
            for round_ in range(num_rounds):
                for index, (kind, layer_range) in enumerate(slots):
                    slot = StageSlot(
                        index=index,
                        kind=kind,
                        layer_range=layer_range,
                        round=round_,
                        iteration=iteration,
                    )
                    gpu = (g0 + index) % n
                    for j in range(round_size):
                        tasks.append(
                            Task(slot=slot, microbatch=round_ * round_size + j, gpu=gpu)
                        )
                g0 = (g0 + num_slots) % n
            if self.flushes and iteration < spec.iterations - 1:
                tasks.append(barrier_task(iteration, num_slots))
        logger.debug(
            f"{num_rounds} rounds of {round_size} micro-batches over {num_slots} slots"
        )
        return tasks


class RoundPipeSchedule(RoundPipeSyncSchedule):
    """
    Asynchronous variant: the next iteration continues the round-robin without a flush.
    """

    kind = ScheduleKind.ROUNDPIPE
    flushes = False
