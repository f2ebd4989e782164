"""
Asymmetric stage partitioning.

For a given upper bound t_max on stage time, the plan with the fewest stages is built greedily:
the fused stage B_1 takes as many of the last layers as fit, then forward stages are packed left to right
and backward stages right to left over the remaining layers. The optimal plan is found by trying every
contiguous sum of layer times as t_max and minimizing (M * S + N * (N - 1)) * t_max.
"""
import logging
from typing import List, Optional, Tuple

from roundpipe.math_utils import NS_PER_SECOND, prefix_sums
from roundpipe.models import (
    LayerCost,
    LayerRange,
    PartitionProblem,
    StageKind,
    StagePlan,
)

logger = logging.getLogger(__name__)

Range = Tuple[int, int]


class InfeasiblePartitionError(Exception):
    def __init__(self, message: str, t_max_ns: Optional[int] = None):
        super().__init__(message)
        self.t_max_ns = t_max_ns


class InvalidPlanError(Exception):
    pass


def _layer_ns(kind: StageKind, cost: LayerCost) -> int:
    return cost.fwd_ns if kind == StageKind.FORWARD else cost.bwd_ns


def stage_time_ns(
    kind: StageKind, layer_range: Optional[LayerRange], costs: List[LayerCost]
) -> int:
    """
    Time of one stage for one micro-batch. Backward and fused stages use t_bwd, which includes the recompute.
    :param kind: stage kind
    :param layer_range: 1-based inclusive range, None for an empty stage
    :param costs: per-layer costs
    :return: nanoseconds
    """
    if layer_range is None:
        return 0
    return sum(_layer_ns(kind, costs[i - 1]) for i in layer_range.layers())


def stage_time(
    kind: StageKind, layer_range: Optional[LayerRange], costs: List[LayerCost]
) -> float:
    return stage_time_ns(kind, layer_range, costs) / NS_PER_SECOND


def stage_memory(
    kind: StageKind,
    layer_range: LayerRange,
    costs: List[LayerCost],
    residency_factor: float = 2.0,
) -> float:
    """
    Memory footprint of a stage: weights for forward stages, weights and gradients otherwise,
    scaled by the residency factor for the prefetched next stage and in-flight gradients.
    """
    params = sum(costs[i - 1].param_bytes for i in layer_range.layers())
    if kind != StageKind.FORWARD:
        params *= 2
    return residency_factor * params


def candidate_tmax_ns(costs: List[LayerCost]) -> List[int]:
    """
    All contiguous sums of forward and of backward layer times, sorted and unique.
    """
    candidates = set()
    for times in ([c.fwd_ns for c in costs], [c.bwd_ns for c in costs]):
        sums = prefix_sums(times)
        for p in range(len(times)):
            for q in range(p + 1, len(times) + 1):
                candidates.add(sums[q] - sums[p])
    return sorted(candidates)


def candidate_tmax(costs: List[LayerCost]) -> List[float]:
    return [t / NS_PER_SECOND for t in candidate_tmax_ns(costs)]


class _Packer:
    """Greedy packing over precomputed per-layer times and memory, all 0-based internally."""

    def __init__(self, problem: PartitionProblem):
        self.problem = problem
        self.fwd = [c.fwd_ns for c in problem.layers]
        self.bwd = [c.bwd_ns for c in problem.layers]
        rf = problem.residency_factor
        self.fwd_mem = [rf * c.param_bytes for c in problem.layers]
        self.bwd_mem = [rf * 2 * c.param_bytes for c in problem.layers]
        self.limit = problem.mem_limit_bytes

    def _fits_memory(self, footprint: float) -> bool:
        return self.limit is None or footprint <= self.limit

    def layer_violation(self, t_max_ns: int) -> Optional[str]:
        for i in range(len(self.bwd)):
            # t_bwd >= t_fwd and backward memory >= forward memory
            if self.bwd[i] > t_max_ns:
                return f"layer {i + 1} alone exceeds t_max"
            if not self._fits_memory(self.bwd_mem[i]):
                return f"layer {i + 1} alone exceeds the memory limit"
        return None

    def _pack(self, times, mems, order) -> List[Range]:
        stages = []
        current: List[int] = []
        time, mem = 0, 0.0
        for i in order:
            if current and (
                time + times[i] > self.t_max_ns or not self._fits_memory(mem + mems[i])
            ):
                stages.append((min(current) + 1, max(current) + 1))
                current, time, mem = [], 0, 0.0
            current.append(i)
            time += times[i]
            mem += mems[i]
        if current:
            stages.append((min(current) + 1, max(current) + 1))
        return stages

    def pack(self, t_max_ns: int) -> Tuple[Range, List[Range], List[Range]]:
        self.t_max_ns = t_max_ns
        num_layers = len(self.bwd)
        start = num_layers - 1
        time, mem = self.bwd[start], self.bwd_mem[start]
        while start > 0:
            if time + self.bwd[start - 1] > t_max_ns or not self._fits_memory(
                mem + self.bwd_mem[start - 1]
            ):
                break
            start -= 1
            time += self.bwd[start]
            mem += self.bwd_mem[start]
        fused = (start + 1, num_layers)
        fwd_stages = self._pack(self.fwd, self.fwd_mem, range(start))
        bwd_stages = self._pack(self.bwd, self.bwd_mem, range(start - 1, -1, -1))
        return fused, fwd_stages, bwd_stages


def objective_ns(problem: PartitionProblem, num_stages: int, t_max_ns: int) -> int:
    n = problem.num_gpus
    return (problem.num_microbatches * num_stages + n * (n - 1)) * t_max_ns


def _to_plan(
    problem: PartitionProblem,
    t_max_ns: int,
    fused: Range,
    fwd_stages: List[Range],
    bwd_stages: List[Range],
) -> StagePlan:
    num_stages = len(fwd_stages) + 1 + len(bwd_stages)
    return StagePlan(
        num_layers=problem.num_layers,
        fwd_stages=[LayerRange(start=s, end=e) for s, e in fwd_stages],
        fused_stage=LayerRange(start=fused[0], end=fused[1]),
        bwd_stages=[LayerRange(start=s, end=e) for s, e in bwd_stages],
        t_max_ns=t_max_ns,
        objective_value=objective_ns(problem, num_stages, t_max_ns) / NS_PER_SECOND,
    )


def greedy_pack(problem: PartitionProblem, t_max_ns: int) -> StagePlan:
    """
    Build the plan with the fewest stages whose stage times all stay within t_max_ns.
    :param problem: partition problem
    :param t_max_ns: stage time bound in nanoseconds
    :return: StagePlan
    :raises InfeasiblePartitionError: a single layer violates the time or memory bound
    """
    if t_max_ns <= 0:
        raise ValueError("t_max must be positive")
    packer = _Packer(problem)
    violation = packer.layer_violation(t_max_ns)
    if violation:
        raise InfeasiblePartitionError(violation, t_max_ns=t_max_ns)
    plan = _to_plan(problem, t_max_ns, *packer.pack(t_max_ns))
    validate_plan(plan, problem)
    return plan


def optimal_partition(problem: PartitionProblem) -> StagePlan:
    """
    Scan all candidate t_max values in ascending order and keep the plan with the smallest objective.
    Ties go to fewer stages, then to the smaller t_max.
    :param problem: partition problem
    :return: StagePlan
    :raises InfeasiblePartitionError: no candidate admits a plan
    """
    packer = _Packer(problem)
    n = problem.num_gpus
    total_bwd = sum(packer.bwd)
    best = None
    best_key = None
    candidates = candidate_tmax_ns(problem.layers)
    logger.debug(f"{len(candidates)} candidate t_max values")
    for t_max_ns in candidates:
        if t_max_ns <= 0:
            continue
        # S * t_max >= total backward time, so no later candidate can win
        if best_key is not None and (
            problem.num_microbatches * total_bwd + n * (n - 1) * t_max_ns > best_key[0]
        ):
            break
        if packer.layer_violation(t_max_ns):
            continue
        fused, fwd_stages, bwd_stages = packer.pack(t_max_ns)
        num_stages = len(fwd_stages) + 1 + len(bwd_stages)
        key = (objective_ns(problem, num_stages, t_max_ns), num_stages, t_max_ns)
        if best_key is None or key < best_key:
            best_key = key
            best = (t_max_ns, fused, fwd_stages, bwd_stages)

    if best is None:
        raise InfeasiblePartitionError("No feasible partition for any candidate t_max")
    plan = _to_plan(problem, *best)
    validate_plan(plan, problem)
    logger.info(
        f"Partitioned {problem.num_layers} layers into S_f={plan.S_f}, S_b={plan.S_b} "
        f"at t_max={plan.t_max_ns}ns"
    )
    return plan


def _check_tiling(ranges: List[LayerRange], num_layers: int, direction: str):
    covered = sorted(layer for r in ranges for layer in r.layers())
    if covered != list(range(1, num_layers + 1)):
        raise InvalidPlanError(f"{direction} stages do not tile layers 1..{num_layers}")


def validate_plan(plan: StagePlan, problem: PartitionProblem):
    """
    Check tiling, ordering, stage times and memory of a plan.
    :raises InvalidPlanError: on the first broken property
    """
    num_layers = problem.num_layers
    if plan.num_layers != num_layers:
        raise InvalidPlanError("plan and problem disagree on the number of layers")
    if plan.fused_stage.end != num_layers:
        raise InvalidPlanError("the fused stage must hold the last layers")
    _check_tiling(plan.fwd_stages + [plan.fused_stage], num_layers, "forward")
    _check_tiling(plan.bwd_stages + [plan.fused_stage], num_layers, "backward")
    for previous, current in zip(plan.fwd_stages, plan.fwd_stages[1:]):
        if current.start != previous.end + 1:
            raise InvalidPlanError("forward stages must ascend")
    for previous, current in zip(plan.bwd_stages, plan.bwd_stages[1:]):
        if current.end != previous.start - 1:
            raise InvalidPlanError("backward stages must descend")

    for kind, layer_range in plan.slots():
        if stage_time_ns(kind, layer_range, problem.layers) > plan.t_max_ns:
            raise InvalidPlanError(f"{kind.value} stage {layer_range} exceeds t_max")
        footprint = stage_memory(
            kind, layer_range, problem.layers, problem.residency_factor
        )
        if problem.mem_limit_bytes is not None and footprint > problem.mem_limit_bytes:
            raise InvalidPlanError(
                f"{kind.value} stage {layer_range} exceeds the memory limit"
            )
