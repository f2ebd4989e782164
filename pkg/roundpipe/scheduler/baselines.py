"""
Baseline schedules with weight binding: stage j (of S = v * N) always runs on GPU j mod N,
and the forward and backward passes share one symmetric layer partition.
"""
import logging
from abc import abstractmethod
from typing import List, Optional, Tuple

from roundpipe.interfaces import ScheduleGeneratorInterface, InvalidScheduleError
from roundpipe.models import ScheduleKind, ScheduleSpec, StageKind, StageSlot, Task
from roundpipe.scheduler.common import barrier_task

logger = logging.getLogger(__name__)

# (is_forward, stage, microbatch)
Step = Tuple[bool, int, int]


def forward_slot_index(stage: int, num_stages: int) -> int:
    return stage


def backward_slot_index(stage: int, num_stages: int) -> int:
    return 2 * num_stages - 1 - stage


class BaselineSchedule(ScheduleGeneratorInterface):
    required_stages_per_gpu: Optional[int] = None

    def check(self, spec: ScheduleSpec):
        super().check(spec)
        if spec.stages is None:
            raise InvalidScheduleError(f"{spec.kind.value} needs a stage partition")
        v = spec.stages_per_gpu
        if self.required_stages_per_gpu is not None and v != self.required_stages_per_gpu:
            raise InvalidScheduleError(
                f"{spec.kind.value} runs {self.required_stages_per_gpu} stage(s) per GPU, got {v}"
            )
        if len(spec.stages) != v * spec.num_gpus:
            raise InvalidScheduleError(
                f"{spec.kind.value} needs {v * spec.num_gpus} stages, got {len(spec.stages)}"
            )

    def num_slots(self, spec: ScheduleSpec) -> int:
        return 2 * len(spec.stages)

    @abstractmethod
    def gpu_order(self, spec: ScheduleSpec, gpu: int) -> List[Step]:
        pass

    def generate(self, spec: ScheduleSpec) -> List[Task]:
        num_stages = len(spec.stages)
        tasks = []
        for iteration in range(spec.iterations):
            for gpu in range(spec.num_gpus):
                for is_forward, stage, microbatch in self.gpu_order(spec, gpu):
                    if is_forward:
                        index = forward_slot_index(stage, num_stages)
                        kind = StageKind.FORWARD
                    else:
                        index = backward_slot_index(stage, num_stages)
                        kind = StageKind.BACKWARD
                    slot = StageSlot(
                        index=index,
                        kind=kind,
                        layer_range=spec.stages[stage],
                        iteration=iteration,
                    )
                    tasks.append(Task(slot=slot, microbatch=microbatch, gpu=gpu))
            if iteration < spec.iterations - 1:
                tasks.append(barrier_task(iteration, 2 * num_stages))
        return tasks


class GPipeSchedule(BaselineSchedule):
    """All forwards, then all backwards."""

    kind = ScheduleKind.GPIPE
    required_stages_per_gpu = 1

    def gpu_order(self, spec: ScheduleSpec, gpu: int) -> List[Step]:
        m = spec.num_microbatches
        return [(True, gpu, j) for j in range(m)] + [(False, gpu, j) for j in range(m)]


class OneFOneBSchedule(BaselineSchedule):
    kind = ScheduleKind.ONE_F_ONE_B
    required_stages_per_gpu = 1

    def gpu_order(self, spec: ScheduleSpec, gpu: int) -> List[Step]:
        m = spec.num_microbatches
        warmup = min(spec.num_gpus - gpu - 1, m)
        steps = [(True, gpu, j) for j in range(warmup)]
        remaining = m - warmup
        for i in range(remaining):
            steps.append((True, gpu, warmup + i))
            steps.append((False, gpu, i))
        steps.extend((False, gpu, j) for j in range(remaining, m))
        return steps


class InterleavedOneFOneBSchedule(BaselineSchedule):
    """
    1F1B over v model chunks per GPU, in the order used by Megatron-LM: micro-batches advance in groups of N,
    cycling through the chunks.
    """

    kind = ScheduleKind.INTERLEAVED_1F1B

    def check(self, spec: ScheduleSpec):
        super().check(spec)
        if spec.num_microbatches % spec.num_gpus != 0:
            raise InvalidScheduleError(
                f"{spec.kind.value} needs micro-batches divisible by the GPU count"
            )

    def _virtual(self, spec: ScheduleSpec, gpu: int, k: int, forward: bool) -> Step:
        n, v = spec.num_gpus, spec.stages_per_gpu
        chunk = (k // n) % v
        if not forward:
            chunk = v - 1 - chunk
        microbatch = (k // (n * v)) * n + k % n
        return forward, chunk * n + gpu, microbatch

    def gpu_order(self, spec: ScheduleSpec, gpu: int) -> List[Step]:
        n, v = spec.num_gpus, spec.stages_per_gpu
        total = spec.num_microbatches * v
        warmup = min((n - gpu - 1) * 2 + (v - 1) * n, total)
        steps = [self._virtual(spec, gpu, k, True) for k in range(warmup)]
        remaining = total - warmup
        for i in range(remaining):
            steps.append(self._virtual(spec, gpu, warmup + i, True))
            steps.append(self._virtual(spec, gpu, i, False))
        steps.extend(self._virtual(spec, gpu, k, False) for k in range(remaining, total))
        return steps


class LoopedBFSSchedule(BaselineSchedule):
    """Breadth-first over micro-batches: every chunk runs all forwards, then chunks unwind with all backwards."""

    kind = ScheduleKind.LOOPED_BFS

    def gpu_order(self, spec: ScheduleSpec, gpu: int) -> List[Step]:
        n, v, m = spec.num_gpus, spec.stages_per_gpu, spec.num_microbatches
        steps = []
        for chunk in range(v):
            steps.extend((True, chunk * n + gpu, j) for j in range(m))
        for chunk in reversed(range(v)):
            steps.extend((False, chunk * n + gpu, j) for j in range(m))
        return steps
