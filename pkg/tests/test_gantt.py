import os
import tempfile

from roundpipe.gantt import PALETTE, render_gantt, write_gantt
from roundpipe.scheduler import roundpipe_spec, synthesize
from roundpipe.simulator import simulate

from tests.utils import RoundPipeTestCase, uniform_stage_plan


class GanttTestCase(RoundPipeTestCase):
    def setUp(self):
        super().setUp()
        plan, costs = uniform_stage_plan(5)
        spec = roundpipe_spec(plan, 2, 2, asynchronous=False, iterations=2)
        self.report = simulate(synthesize(spec), costs, spec)

    def test_one_bar_per_event(self):
        svg = render_gantt(self.report)
        self.assertTrue(svg.startswith("<svg"))
        self.assertEqual(svg.count("<title>"), len(self.report.events))
        self.assertIn("GPU 1", svg)
        self.assertIn("roundpipe-sync on 2 GPUs", svg)

    def test_legend_lists_slots(self):
        svg = render_gantt(self.report, title="custom")
        self.assertIn("custom", svg)
        for index in range(5):
            self.assertIn(f"slot {index}:", svg)
        self.assertIn(PALETTE[0], svg)

    def test_title_is_escaped(self):
        svg = render_gantt(self.report, title="a < b")
        self.assertIn("a &lt; b", svg)

    def test_write(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "gantt.svg")
            write_gantt(self.report, path)
            with open(path) as f:
                self.assertEqual(f.read(), render_gantt(self.report))
