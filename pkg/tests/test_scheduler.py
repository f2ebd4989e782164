from roundpipe.models import (
    LayerRange,
    PartitionProblem,
    ScheduleKind,
    ScheduleSpec,
    StageKind,
    StageSlot,
    Task,
)
from roundpipe.partitioner import optimal_partition
from roundpipe.scheduler import (
    InvalidScheduleError,
    ViolationKind,
    baseline_spec,
    default_round_size,
    roundpipe_spec,
    synthesize,
    validate,
)
from roundpipe.scheduler.common import round_span, symmetric_partition

from tests.utils import RoundPipeTestCase, uniform_costs, uniform_stage_plan

BASELINES = [
    ScheduleKind.GPIPE,
    ScheduleKind.ONE_F_ONE_B,
    ScheduleKind.INTERLEAVED_1F1B,
    ScheduleKind.LOOPED_BFS,
]


class RoundSizeTestCase(RoundPipeTestCase):
    def test_round_size_values(self):
        self.assertEqual(default_round_size(16, 8, 33), 8)
        self.assertEqual(default_round_size(24, 4, 7), 6)
        self.assertEqual(default_round_size(8, 8, 5), 8)

    def test_ties_prefer_fewer_rounds(self):
        # rounds of 4 and of 8 both end after 27 stage times
        self.assertEqual(round_span(16, 4, 6, 4), 27)
        self.assertEqual(round_span(16, 4, 6, 8), 27)
        self.assertEqual(round_span(16, 4, 6, 16), 33)
        self.assertEqual(default_round_size(16, 4, 6), 8)

    def test_indivisible_counts(self):
        self.assertEqual(default_round_size(17, 4, 5), 17)
        self.assertEqual(default_round_size(3, 2, 3), 3)
        self.assertEqual(default_round_size(2, 4, 3), 2)

    def test_balanced_span(self):
        for n in (2, 3, 4, 8):
            for s in range(1, 3 * n + 1):
                for m in range(n, 4 * n + 1, n):
                    d = default_round_size(m, n, s)
                    self.assertEqual(m % d, 0)
                    self.assertGreaterEqual(d, n)
                    self.assertEqual(round_span(m, n, s, d), m * s // n + n - 1, (n, s, m))

    def test_no_legal_round_size_is_shorter(self):
        for n in (2, 3, 4):
            for s in range(1, 3 * n + 1):
                for m in range(n, 4 * n + 1):
                    best = round_span(m, n, s, default_round_size(m, n, s))
                    for d in range(n, m + 1):
                        if m % d == 0:
                            self.assertLessEqual(best, round_span(m, n, s, d), (n, s, m, d))


class RoundPipeScheduleTestCase(RoundPipeTestCase):
    def test_slot_gpu_formula(self):
        plan, _ = uniform_stage_plan(6)
        spec = roundpipe_spec(plan, num_gpus=4, num_microbatches=8, round_size=4)
        tasks = synthesize(spec)
        self.assertEqual(validate(tasks, spec), [])
        for task in tasks:
            if task.slot.round == 0:
                self.assertEqual(task.gpu, task.slot.index % 4)
        first_of_round_two = [
            t for t in tasks if t.slot.round == 1 and t.slot.index == 0
        ][0]
        self.assertEqual(first_of_round_two.gpu, 2)

    def test_round_continuity(self):
        plan, _ = uniform_stage_plan(7)
        n = 4
        spec = roundpipe_spec(plan, num_gpus=n, num_microbatches=16, round_size=4)
        tasks = synthesize(spec)
        first_gpu = {
            t.slot.round: t.gpu for t in tasks if t.slot.index == 0 and not t.is_barrier
        }
        for round_ in range(1, 4):
            self.assertEqual(first_gpu[round_], (first_gpu[round_ - 1] + plan.S) % n)

    def test_two_round_scenario(self):
        problem = PartitionProblem(
            layers=uniform_costs(13), num_gpus=4, num_microbatches=16
        )
        plan = optimal_partition(problem)
        spec = roundpipe_spec(plan, num_gpus=4, num_microbatches=16, round_size=8)
        tasks = synthesize(spec)
        self.assertEqual(len(tasks), 2 * plan.S * 8)
        self.assertEqual({t.slot.round for t in tasks}, {0, 1})
        self.assertEqual(validate(tasks, spec), [])

    def test_async_iteration_chaining(self):
        plan, _ = uniform_stage_plan(5)
        n = 4
        spec = roundpipe_spec(plan, num_gpus=n, num_microbatches=8, iterations=3)
        tasks = synthesize(spec)
        self.assertFalse(any(t.is_barrier for t in tasks))
        for iteration in range(2):
            last = [
                t
                for t in tasks
                if t.slot.iteration == iteration and t.slot.index == plan.S - 1
            ][-1]
            first = [
                t for t in tasks if t.slot.iteration == iteration + 1 and t.slot.index == 0
            ][0]
            self.assertEqual(first.gpu, (last.gpu + 1) % n)
        self.assertEqual(validate(tasks, spec), [])

    def test_sync_inserts_flush(self):
        plan, _ = uniform_stage_plan(5)
        spec = roundpipe_spec(
            plan, num_gpus=4, num_microbatches=8, iterations=3, asynchronous=False
        )
        tasks = synthesize(spec)
        barriers = [t for t in tasks if t.is_barrier]
        self.assertEqual([b.slot.iteration for b in barriers], [0, 1])
        self.assertTrue(all(b.gpu is None for b in barriers))
        self.assertEqual(validate(tasks, spec), [])

    def test_slot_kinds_follow_plan(self):
        plan, _ = uniform_stage_plan(6)
        spec = roundpipe_spec(plan, num_gpus=2, num_microbatches=2)
        kinds = {t.slot.index: t.slot.kind for t in synthesize(spec)}
        self.assertEqual(
            [kinds[i] for i in range(plan.S)],
            [StageKind.FORWARD] * plan.S_f
            + [StageKind.FUSED]
            + [StageKind.BACKWARD] * (plan.S_b - 1),
        )

    def test_round_size_below_gpus(self):
        plan, _ = uniform_stage_plan(5)
        with self.assertRaises(InvalidScheduleError):
            synthesize(roundpipe_spec(plan, num_gpus=4, num_microbatches=8, round_size=2))

    def test_round_size_not_dividing(self):
        plan, _ = uniform_stage_plan(5)
        with self.assertRaises(InvalidScheduleError):
            synthesize(roundpipe_spec(plan, num_gpus=4, num_microbatches=10, round_size=4))

    def test_missing_plan(self):
        with self.assertRaises(InvalidScheduleError):
            synthesize(
                ScheduleSpec(kind=ScheduleKind.ROUNDPIPE, num_gpus=2, num_microbatches=2)
            )


class BaselineScheduleTestCase(RoundPipeTestCase):
    def test_gpipe_waves(self):
        spec = baseline_spec(ScheduleKind.GPIPE, uniform_costs(4), 4, 8)
        tasks = synthesize(spec)
        self.assertEqual(validate(tasks, spec), [])
        for gpu in range(4):
            own = [t for t in tasks if t.gpu == gpu]
            self.assertEqual(
                [t.slot.kind for t in own], [StageKind.FORWARD] * 8 + [StageKind.BACKWARD] * 8
            )
            self.assertEqual([t.microbatch for t in own], list(range(8)) * 2)
            self.assertEqual(own[0].slot.index, gpu)
            self.assertEqual(own[-1].slot.index, 7 - gpu)

    def test_one_f_one_b_warmup(self):
        spec = baseline_spec(ScheduleKind.ONE_F_ONE_B, uniform_costs(4), 4, 8)
        tasks = synthesize(spec)
        first_gpu = [t for t in tasks if t.gpu == 0]
        self.assertEqual(
            [t.slot.kind for t in first_gpu[:5]],
            [StageKind.FORWARD] * 4 + [StageKind.BACKWARD],
        )
        last_gpu = [t for t in tasks if t.gpu == 3]
        self.assertEqual(
            [t.slot.kind for t in last_gpu[:4]],
            [StageKind.FORWARD, StageKind.BACKWARD] * 2,
        )

    def test_stage_binding(self):
        for kind in (ScheduleKind.INTERLEAVED_1F1B, ScheduleKind.LOOPED_BFS):
            spec = baseline_spec(kind, uniform_costs(12), 4, 8, stages_per_gpu=3)
            self.assertEqual(len(spec.stages), 12)
            tasks = synthesize(spec)
            self.assertEqual(validate(tasks, spec), [])
            for task in tasks:
                stage = task.slot.index if task.slot.index < 12 else 23 - task.slot.index
                self.assertEqual(task.gpu, stage % 4)
                self.assertEqual(task.slot.layer_range, spec.stages[stage])

    def test_single_stage_baselines_ignore_chunks(self):
        spec = baseline_spec(
            ScheduleKind.GPIPE, uniform_costs(8), 4, 8, stages_per_gpu=2
        )
        self.assertEqual(spec.stages_per_gpu, 1)
        self.assertEqual(len(spec.stages), 4)

    def test_interleaved_needs_divisible_microbatches(self):
        spec = baseline_spec(ScheduleKind.INTERLEAVED_1F1B, uniform_costs(8), 4, 6)
        with self.assertRaises(InvalidScheduleError):
            synthesize(spec)

    def test_too_few_layers(self):
        with self.assertRaises(InvalidScheduleError):
            baseline_spec(ScheduleKind.LOOPED_BFS, uniform_costs(5), 4, 8)

    def test_wrong_stage_count(self):
        spec = ScheduleSpec(
            kind=ScheduleKind.LOOPED_BFS,
            num_gpus=2,
            num_microbatches=2,
            stages=[LayerRange(start=1, end=1)],
            stages_per_gpu=1,
        )
        with self.assertRaises(InvalidScheduleError):
            synthesize(spec)

    def test_symmetric_partition_balances(self):
        costs = uniform_costs(10)
        stages = symmetric_partition(costs, 4)
        self.assertEqual(sum(s.size for s in stages), 10)
        self.assertEqual(max(s.size for s in stages), 3)
        self.assertEqual(stages[0].start, 1)
        self.assertEqual(stages[-1].end, 10)


class ValidateTestCase(RoundPipeTestCase):
    def test_coverage_sweep(self):
        for n in (1, 2, 4, 8):
            for m in sorted(set(range(n, 4 * n + 1)) | set(range(n, 33, n))):
                plan, costs = uniform_stage_plan(n + 2)
                for asynchronous in (True, False):
                    spec = roundpipe_spec(
                        plan, n, m, asynchronous=asynchronous, iterations=2
                    )
                    self.assertEqual(validate(synthesize(spec), spec), [])
                for kind in BASELINES:
                    layers = uniform_costs(2 * n)
                    spec = baseline_spec(kind, layers, n, m, iterations=2)
                    if kind == ScheduleKind.INTERLEAVED_1F1B and m % n:
                        continue
                    self.assertEqual(validate(synthesize(spec), spec), [], (kind, n, m))

    def test_duplicate(self):
        plan, _ = uniform_stage_plan(5)
        spec = roundpipe_spec(plan, num_gpus=2, num_microbatches=4)
        tasks = synthesize(spec)
        tasks.append(tasks[3])
        self.assertIn(ViolationKind.DUPLICATE, [v.kind for v in validate(tasks, spec)])

    def test_missing(self):
        plan, _ = uniform_stage_plan(5)
        spec = roundpipe_spec(plan, num_gpus=2, num_microbatches=4)
        tasks = synthesize(spec)[:-1]
        self.assertIn(ViolationKind.COVERAGE, [v.kind for v in validate(tasks, spec)])

    def test_wrong_gpu(self):
        plan, _ = uniform_stage_plan(5)
        spec = roundpipe_spec(plan, num_gpus=2, num_microbatches=4)
        tasks = synthesize(spec)
        tasks[0] = Task(slot=tasks[0].slot, microbatch=tasks[0].microbatch, gpu=1)
        self.assertIn(ViolationKind.GPU, [v.kind for v in validate(tasks, spec)])

    def test_swapped_slots(self):
        plan, _ = uniform_stage_plan(6)
        spec = roundpipe_spec(plan, num_gpus=4, num_microbatches=4)
        tasks = synthesize(spec)
        gpu_zero = [i for i, t in enumerate(tasks) if t.gpu == 0]
        first, last = gpu_zero[0], gpu_zero[-1]
        self.assertNotEqual(tasks[first].slot.index, tasks[last].slot.index)
        tasks[first], tasks[last] = tasks[last], tasks[first]
        kinds = [v.kind for v in validate(tasks, spec)]
        self.assertIn(ViolationKind.ORDERING, kinds)

    def test_backward_before_forward_on_same_gpu(self):
        spec = baseline_spec(ScheduleKind.GPIPE, uniform_costs(2), 2, 2)
        tasks = synthesize(spec)
        last_gpu = [i for i, t in enumerate(tasks) if t.gpu == 1]
        # forward of micro-batch 0 on the last stage, then its backward
        forward = last_gpu[0]
        backward = [
            i
            for i in last_gpu
            if tasks[i].slot.kind == StageKind.BACKWARD and tasks[i].microbatch == 0
        ][0]
        tasks[forward], tasks[backward] = tasks[backward], tasks[forward]
        self.assertIn(ViolationKind.ORDERING, [v.kind for v in validate(tasks, spec)])

    def test_barriers_are_ignored(self):
        plan, _ = uniform_stage_plan(5)
        spec = roundpipe_spec(
            plan, num_gpus=2, num_microbatches=2, asynchronous=False, iterations=2
        )
        tasks = synthesize(spec)
        self.assertTrue(
            any(
                t.slot == StageSlot(index=plan.S, kind=StageKind.BARRIER, iteration=0)
                for t in tasks
            )
        )
        self.assertEqual(validate(tasks, spec), [])
