import time

from roundpipe.config_loader import load_model_config, load_gpu_spec
from roundpipe.cost_model import layer_costs
from roundpipe.models import (
    LayerRange,
    PartitionProblem,
    StageKind,
    Workload,
    HeadMode,
)
from roundpipe.partitioner import (
    stage_time,
    stage_time_ns,
    candidate_tmax,
    candidate_tmax_ns,
    greedy_pack,
    optimal_partition,
    validate_plan,
    objective_ns,
    InfeasiblePartitionError,
    InvalidPlanError,
)

from tests.utils import (
    RoundPipeTestCase,
    brute_force_objective,
    ns_cost,
    uniform_costs,
)


class StageTimeTestCase(RoundPipeTestCase):
    def test_empty_range(self):
        self.assertEqual(stage_time(StageKind.FORWARD, None, uniform_costs(3)), 0)

    def test_forward_sum(self):
        costs = uniform_costs(3, t_fwd_ns=1_000_000, t_bwd_ns=3_000_000)
        self.assertEqual(
            stage_time_ns(StageKind.FORWARD, LayerRange(start=1, end=3), costs),
            3_000_000,
        )
        self.assertAlmostEqual(
            stage_time(StageKind.FORWARD, LayerRange(start=1, end=3), costs), 0.003
        )

    def test_backward_and_fused(self):
        costs = uniform_costs(12, t_fwd_ns=1_000_000, t_bwd_ns=3_000_000)
        self.assertEqual(
            stage_time_ns(StageKind.BACKWARD, LayerRange(start=12, end=12), costs),
            3_000_000,
        )
        self.assertEqual(
            stage_time_ns(StageKind.FUSED, LayerRange(start=11, end=12), costs),
            6_000_000,
        )


class CandidateTmaxTestCase(RoundPipeTestCase):
    def test_two_layers(self):
        costs = [ns_cost(1, 3), ns_cost(2, 6)]
        self.assertEqual(candidate_tmax_ns(costs), [1, 2, 3, 6, 9])
        costs = [ns_cost(10**9, 3 * 10**9), ns_cost(2 * 10**9, 6 * 10**9)]
        self.assertEqual(candidate_tmax(costs), [1.0, 2.0, 3.0, 6.0, 9.0])

    def test_single_layer(self):
        self.assertEqual(candidate_tmax_ns([ns_cost(4, 7)]), [4, 7])

    def test_uniform_forward_sums(self):
        candidates = candidate_tmax_ns(uniform_costs(4, t_fwd_ns=1, t_bwd_ns=1))
        self.assertEqual(candidates, [1, 2, 3, 4])

    def test_sorted_unique(self):
        problem = self.random_problem()
        self.assertSortedUnique(candidate_tmax_ns(problem.layers))


class GreedyPackTestCase(RoundPipeTestCase):
    def test_uniform_example(self):
        problem = PartitionProblem(
            layers=uniform_costs(4, t_fwd_ns=1, t_bwd_ns=3),
            num_gpus=1,
            num_microbatches=1,
        )
        plan = greedy_pack(problem, 3)
        self.assertEqual(plan.fused_stage, LayerRange(start=4, end=4))
        self.assertEqual(plan.fwd_stages, [LayerRange(start=1, end=3)])
        self.assertEqual(
            plan.bwd_stages,
            [
                LayerRange(start=3, end=3),
                LayerRange(start=2, end=2),
                LayerRange(start=1, end=1),
            ],
        )
        self.assertEqual(plan.S, 5)
        self.assertEqual(plan.S_f, 1)
        self.assertEqual(plan.S_b, 4)

    def test_tmax_below_single_layer(self):
        problem = PartitionProblem(
            layers=uniform_costs(4, t_fwd_ns=1, t_bwd_ns=3),
            num_gpus=1,
            num_microbatches=1,
        )
        with self.assertRaises(InfeasiblePartitionError) as context:
            greedy_pack(problem, 2)
        self.assertEqual(context.exception.t_max_ns, 2)

    def test_memory_below_single_layer(self):
        problem = PartitionProblem(
            layers=[ns_cost(1, 3, param_bytes=10) for _ in range(4)],
            num_gpus=1,
            num_microbatches=1,
            mem_limit_bytes=39,
        )
        with self.assertRaises(InfeasiblePartitionError):
            greedy_pack(problem, 100)

    def test_memory_splits_stages(self):
        problem = PartitionProblem(
            layers=[ns_cost(1, 3, param_bytes=10) for _ in range(4)],
            num_gpus=1,
            num_microbatches=1,
            mem_limit_bytes=40,
        )
        plan = greedy_pack(problem, 100)
        # each backward stage holds weights and gradients of a single layer
        self.assertEqual(plan.fused_stage, LayerRange(start=4, end=4))
        self.assertEqual(plan.S_b, 4)
        self.assertEqual(
            plan.fwd_stages, [LayerRange(start=1, end=2), LayerRange(start=3, end=3)]
        )

    def test_monotone(self):
        for _ in range(50):
            problem = self.random_problem()
            previous = None
            for t_max_ns in candidate_tmax_ns(problem.layers):
                try:
                    plan = greedy_pack(problem, t_max_ns)
                except InfeasiblePartitionError:
                    self.assertIsNone(previous)
                    continue
                if previous is not None:
                    self.assertLessEqual(plan.S, previous.S)
                previous = plan

    def test_rejects_non_positive_tmax(self):
        problem = PartitionProblem(
            layers=uniform_costs(2), num_gpus=1, num_microbatches=1
        )
        with self.assertRaises(ValueError):
            greedy_pack(problem, 0)


class OptimalPartitionTestCase(RoundPipeTestCase):
    def test_matches_brute_force(self):
        for _ in range(200):
            problem = self.random_problem(max_layers=10, max_gpus=4, max_microbatches=8)
            expected = brute_force_objective(problem)
            if expected is None:
                with self.assertRaises(InfeasiblePartitionError):
                    optimal_partition(problem)
                continue
            plan = optimal_partition(problem)
            self.assertEqual(
                objective_ns(problem, plan.S, plan.t_max_ns), expected, problem
            )

    def test_uniform_with_head(self):
        problem = PartitionProblem(
            layers=uniform_costs(13, t_fwd_ns=1000, t_bwd_ns=3000),
            num_gpus=4,
            num_microbatches=8,
        )
        plan = optimal_partition(problem)
        self.assertEqual(
            objective_ns(problem, plan.S, plan.t_max_ns), brute_force_objective(problem)
        )
        self.assertEqual(plan.t_max_ns, 3000)
        validate_plan(plan, problem)

    def test_single_gpu_single_microbatch(self):
        problem = PartitionProblem(
            layers=uniform_costs(4, t_fwd_ns=1000, t_bwd_ns=3000),
            num_gpus=1,
            num_microbatches=1,
        )
        plan = optimal_partition(problem)
        self.assertEqual(
            objective_ns(problem, plan.S, plan.t_max_ns), brute_force_objective(problem)
        )
        # with no pipeline to fill, one fused stage over all layers is as good as any split
        self.assertEqual(plan.S, 1)

    def test_single_layer(self):
        problem = PartitionProblem(
            layers=uniform_costs(1), num_gpus=1, num_microbatches=4
        )
        plan = optimal_partition(problem)
        self.assertEqual(plan.S, 1)
        self.assertEqual(plan.fwd_stages, [])
        self.assertEqual(plan.bwd_stages, [])
        self.assertEqual(plan.fused_stage, LayerRange(start=1, end=1))

    def test_tie_prefers_fewer_stages(self):
        problem = PartitionProblem(
            layers=uniform_costs(4, t_fwd_ns=1000, t_bwd_ns=3000),
            num_gpus=2,
            num_microbatches=2,
        )
        plan = optimal_partition(problem)
        keys = []
        for t_max_ns in candidate_tmax_ns(problem.layers):
            try:
                candidate = greedy_pack(problem, t_max_ns)
            except InfeasiblePartitionError:
                continue
            keys.append(
                (objective_ns(problem, candidate.S, t_max_ns), candidate.S, t_max_ns)
            )
        self.assertEqual(
            (objective_ns(problem, plan.S, plan.t_max_ns), plan.S, plan.t_max_ns),
            min(keys),
        )

    def test_infeasible_memory(self):
        problem = PartitionProblem(
            layers=[ns_cost(1, 3, param_bytes=100) for _ in range(3)],
            num_gpus=1,
            num_microbatches=1,
            mem_limit_bytes=10,
        )
        with self.assertRaises(InfeasiblePartitionError):
            optimal_partition(problem)

    def test_problem_requires_enough_microbatches(self):
        with self.assertRaises(ValueError):
            PartitionProblem(layers=uniform_costs(2), num_gpus=4, num_microbatches=2)

    def test_objective_value_in_seconds(self):
        problem = PartitionProblem(
            layers=uniform_costs(4, t_fwd_ns=1000, t_bwd_ns=3000),
            num_gpus=2,
            num_microbatches=4,
        )
        plan = optimal_partition(problem)
        self.assertAlmostEqual(
            plan.objective_value,
            objective_ns(problem, plan.S, plan.t_max_ns) / 1e9,
        )

    def test_validate_rejects_broken_plan(self):
        problem = PartitionProblem(
            layers=uniform_costs(4, t_fwd_ns=1, t_bwd_ns=3),
            num_gpus=1,
            num_microbatches=1,
        )
        plan = greedy_pack(problem, 3)
        broken = plan.model_copy(update={"bwd_stages": plan.bwd_stages[:-1]})
        with self.assertRaises(InvalidPlanError):
            validate_plan(broken, problem)
        too_tight = plan.model_copy(update={"t_max_ns": 2})
        with self.assertRaises(InvalidPlanError):
            validate_plan(too_tight, problem)


class PartitionScalabilityTestCase(RoundPipeTestCase):
    def test_synthetic_models(self):
        gpu = load_gpu_spec("rtx4090")
        w = Workload(seq_len=2048, micro_batch=4)
        for name, bound in (("qwen3-32b", 1.0), ("qwen3-235b", 10.0)):
            costs = layer_costs(load_model_config(name), w, gpu, HeadMode.LAYER)
            problem = PartitionProblem(layers=costs, num_gpus=8, num_microbatches=16)
            started = time.perf_counter()
            plan = optimal_partition(problem)
            self.assertLess(time.perf_counter() - started, bound)
            validate_plan(plan, problem)

    def test_random_94_layers(self):
        layers = []
        for _ in range(94):
            t_fwd = self.seeded_random.randint(1000, 5000)
            layers.append(ns_cost(t_fwd, 3 * t_fwd))
        problem = PartitionProblem(layers=layers, num_gpus=8, num_microbatches=16)
        started = time.perf_counter()
        optimal_partition(problem)
        self.assertLess(time.perf_counter() - started, 10.0)
