import itertools
import random
from typing import List, Optional, Tuple
from unittest import TestCase

import numpy as np

from roundpipe.math_utils import NS_PER_SECOND
from roundpipe.models import LayerCost, LayerRange, PartitionProblem, StagePlan


def ns_cost(t_fwd_ns: int, t_bwd_ns: int, param_bytes: int = 0) -> LayerCost:
    return LayerCost(
        t_fwd=t_fwd_ns / NS_PER_SECOND,
        t_bwd=t_bwd_ns / NS_PER_SECOND,
        param_bytes=param_bytes,
    )


def uniform_costs(num_layers: int, t_fwd_ns: int = 1000, t_bwd_ns: int = 3000):
    return [ns_cost(t_fwd_ns, t_bwd_ns) for _ in range(num_layers)]


def uniform_stage_plan(num_stages: int, t_ns: int = 1000) -> Tuple[StagePlan, List[LayerCost]]:
    """
    A plan in which every stage takes exactly t_ns: one layer per backward stage, forward layers
    grouped so each forward stage sums to t_ns. For two stages there is no forward stage, only the
    stage times matter to the simulator.
    """
    num_fwd = (num_stages - 1) // 2
    num_bwd = num_stages - num_fwd
    num_layers = num_bwd
    fwd_layers = num_layers - 1
    fwd_times = [0] * fwd_layers
    fwd_stages = []
    if num_fwd:
        sizes = [fwd_layers // num_fwd] * num_fwd
        for i in range(fwd_layers % num_fwd):
            sizes[i] += 1
        start = 1
        for size in sizes:
            shares = [t_ns // size] * size
            shares[0] += t_ns - sum(shares)
            for offset, share in enumerate(shares):
                fwd_times[start - 1 + offset] = share
            fwd_stages.append(LayerRange(start=start, end=start + size - 1))
            start += size
    costs = [ns_cost(f, t_ns) for f in fwd_times] + [ns_cost(t_ns, t_ns)]
    plan = StagePlan(
        num_layers=num_layers,
        fwd_stages=fwd_stages,
        fused_stage=LayerRange(start=num_layers, end=num_layers),
        bwd_stages=[LayerRange(start=i, end=i) for i in range(num_layers - 1, 0, -1)],
        t_max_ns=t_ns,
    )
    return plan, costs


def _compositions(n: int):
    """All ways to cut n ordered items into contiguous non-empty groups, as group sizes."""
    if n == 0:
        yield []
        return
    for cuts in itertools.product([False, True], repeat=n - 1):
        sizes, size = [], 1
        for cut in cuts:
            if cut:
                sizes.append(size)
                size = 1
            else:
                size += 1
        sizes.append(size)
        yield sizes


def _frontier(times, mems, limit) -> dict:
    """Smallest achievable max stage time per stage count over all contiguous groupings."""
    best = {}
    for sizes in _compositions(len(times)):
        start, worst, ok = 0, 0, True
        for size in sizes:
            worst = max(worst, sum(times[start : start + size]))
            if limit is not None and sum(mems[start : start + size]) > limit:
                ok = False
                break
            start += size
        if ok and (len(sizes) not in best or worst < best[len(sizes)]):
            best[len(sizes)] = worst
    return best


def brute_force_objective(problem: PartitionProblem) -> Optional[int]:
    """
    Exhaustive minimum of (M * S + N * (N - 1)) * t_max in integer nanoseconds over all plans with
    a fused last stage, or None if nothing fits.
    """
    fwd = [c.fwd_ns for c in problem.layers]
    bwd = [c.bwd_ns for c in problem.layers]
    rf = problem.residency_factor
    fwd_mem = [rf * c.param_bytes for c in problem.layers]
    bwd_mem = [rf * 2 * c.param_bytes for c in problem.layers]
    limit = problem.mem_limit_bytes
    n, m, num_layers = problem.num_gpus, problem.num_microbatches, len(fwd)
    best = None
    for fused_size in range(1, num_layers + 1):
        rest = num_layers - fused_size
        fused_time = sum(bwd[rest:])
        if limit is not None and sum(bwd_mem[rest:]) > limit:
            continue
        fwd_frontier = _frontier(fwd[:rest], fwd_mem[:rest], limit)
        bwd_frontier = _frontier(
            list(reversed(bwd[:rest])), list(reversed(bwd_mem[:rest])), limit
        )
        for fwd_count, fwd_time in fwd_frontier.items():
            for bwd_count, bwd_time in bwd_frontier.items():
                t_max = max(fused_time, fwd_time, bwd_time)
                num_stages = fwd_count + 1 + bwd_count
                value = (m * num_stages + n * (n - 1)) * t_max
                if best is None or value < best:
                    best = value
    return best


def brute_force_makespan(sizes: List[int], num_windows: int) -> int:
    """Optimal makespan over all assignments of sizes to windows."""
    best = None
    for assignment in itertools.product(range(num_windows), repeat=len(sizes)):
        loads = [0] * num_windows
        for size, window in zip(sizes, assignment):
            loads[window] += size
        if best is None or max(loads) < best:
            best = max(loads)
    return best


class RoundPipeTestCase(TestCase):
    SEED = 42

    def setUp(self):
        np.random.seed(self.SEED)
        self.seeded_random = random.Random(self.SEED)

    def random_problem(
        self, max_layers: int = 10, max_gpus: int = 4, max_microbatches: int = 8
    ) -> PartitionProblem:
        num_layers = self.seeded_random.randint(1, max_layers)
        num_gpus = self.seeded_random.randint(1, max_gpus)
        num_microbatches = self.seeded_random.randint(num_gpus, max_microbatches)
        layers = []
        for _ in range(num_layers):
            t_fwd = self.seeded_random.randint(1, 20) * 1000
            t_bwd = t_fwd * self.seeded_random.randint(1, 4)
            layers.append(ns_cost(t_fwd, t_bwd, self.seeded_random.randint(1, 10)))
        mem_limit = None
        if self.seeded_random.random() < 0.5:
            mem_limit = self.seeded_random.randint(40, 120)
        return PartitionProblem(
            layers=layers,
            num_gpus=num_gpus,
            num_microbatches=num_microbatches,
            mem_limit_bytes=mem_limit,
        )

    def assertSortedUnique(self, values, msg=None):
        if list(values) != sorted(set(values)):
            raise self.failureException(
                self._formatMessage(msg, f"{values} is not sorted and unique")
            )

    def tearDown(self):
        pass

