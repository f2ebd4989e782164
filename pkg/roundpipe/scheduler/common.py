import enum
import logging
from typing import List, Optional

from pydantic import BaseModel

from roundpipe.interfaces import InvalidScheduleError
from roundpipe.math_utils import divisors
from roundpipe.models import LayerCost, LayerRange, StageKind, StageSlot, Task

logger = logging.getLogger(__name__)


class ViolationKind(str, enum.Enum):
    DUPLICATE = "duplicate"
    COVERAGE = "coverage"
    GPU = "gpu"
    ORDERING = "ordering"


class ScheduleViolation(BaseModel):
    kind: ViolationKind
    message: str
    task: Optional[Task] = None


def round_span(num_microbatches: int, num_gpus: int, num_slots: int, round_size: int) -> int:
    """
    Makespan of one RoundPipe iteration in stage times when every stage takes the same time.
    Global slot G starts at (G mod N) + (G div N) * M_R and the last one ends M_R later.
    """
    last = (num_microbatches // round_size) * num_slots - 1
    return last % num_gpus + (last // num_gpus) * round_size + round_size


def default_round_size(num_microbatches: int, num_gpus: int, num_slots: int) -> int:
    """
    The divisor of M that is at least N with the shortest balanced makespan, preferring fewer rounds
    on ties. Whenever N divides M the span is M * S / N + N - 1.
    """
    candidates = [d for d in divisors(num_microbatches) if d >= num_gpus]
    if not candidates:
        return num_microbatches
    return min(
        candidates,
        key=lambda d: (round_span(num_microbatches, num_gpus, num_slots, d), -d),
    )


def barrier_task(iteration: int, index: int) -> Task:
    return Task(
        slot=StageSlot(index=index, kind=StageKind.BARRIER, iteration=iteration),
        microbatch=0,
        gpu=None,
    )


def symmetric_partition(costs: List[LayerCost], num_stages: int) -> List[LayerRange]:
    """
    Split layers into num_stages contiguous stages minimizing the largest per-stage forward plus backward time.
    :param costs: per-layer costs
    :param num_stages: stage count
    :return: list of layer ranges, ascending
    :raises InvalidScheduleError: fewer layers than stages
    """
    num_layers = len(costs)
    if num_stages < 1 or num_layers < num_stages:
        raise InvalidScheduleError(
            f"Cannot split {num_layers} layers into {num_stages} stages"
        )
    weights = [c.fwd_ns + c.bwd_ns for c in costs]
    sums = [0]
    for w in weights:
        sums.append(sums[-1] + w)

    infinity = float("inf")
    # best[k][i]: smallest max stage weight for the first i layers in k stages
    best = [[infinity] * (num_layers + 1) for _ in range(num_stages + 1)]
    cut = [[0] * (num_layers + 1) for _ in range(num_stages + 1)]
    best[0][0] = 0
    for k in range(1, num_stages + 1):
        for i in range(k, num_layers - (num_stages - k) + 1):
            for j in range(k - 1, i):
                value = max(best[k - 1][j], sums[i] - sums[j])
                if value < best[k][i]:
                    best[k][i] = value
                    cut[k][i] = j

    ranges = []
    i = num_layers
    for k in range(num_stages, 0, -1):
        j = cut[k][i]
        ranges.append(LayerRange(start=j + 1, end=i))
        i = j
    ranges.reverse()
    return ranges
