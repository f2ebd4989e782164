import logging
from typing import Dict, List, Optional

from jinja2 import (
    ChoiceLoader,
    Environment,
    FileSystemLoader,
    PackageLoader,
    select_autoescape,
)
from pydantic import BaseModel

from roundpipe.models import SimReport

logger = logging.getLogger(__name__)

JINJA_ENV = Environment(
    loader=ChoiceLoader(
        [
            PackageLoader("roundpipe", "templates"),
            FileSystemLoader("./templates"),
        ]
    ),
    autoescape=select_autoescape(["svg"]),
)

GANTT_TEMPLATE = "gantt.svg"

# colour of slot i is PALETTE[i % len(PALETTE)]
PALETTE = [
    "#4e79a7",
    "#f28e2b",
    "#e15759",
    "#76b7b2",
    "#59a14f",
    "#edc948",
    "#b07aa1",
    "#ff9da7",
    "#9c755f",
    "#bab0ac",
    "#1f77b4",
    "#8c564b",
]

WIDTH = 1200
LANE_HEIGHT = 28
LANE_GAP = 6
MARGIN_LEFT = 70
MARGIN_RIGHT = 20
MARGIN_TOP = 50
LEGEND_ROW = 18


class GanttBar(BaseModel):
    x: str
    y: int
    width: str
    color: str
    label: str


class LegendEntry(BaseModel):
    slot: int
    color: str
    label: str


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def render_gantt(report: SimReport, title: Optional[str] = None) -> str:
    """
    Render one lane per GPU, bars coloured by stage slot, with a slot legend below the lanes.
    :param report: simulation report
    :param title: chart title, defaults to the schedule name
    :return: SVG document
    """
    chart_width = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    scale = chart_width / report.makespan_ns if report.makespan_ns else 0.0

    bars: List[GanttBar] = []
    legend: Dict[int, LegendEntry] = {}
    for event in report.events:
        slot = event.task.slot
        color = PALETTE[slot.index % len(PALETTE)]
        bars.append(
            GanttBar(
                x=_fmt(MARGIN_LEFT + event.start_ns * scale),
                y=MARGIN_TOP + event.task.gpu * (LANE_HEIGHT + LANE_GAP),
                width=_fmt(event.duration_ns * scale),
                color=color,
                label=f"iter {slot.iteration} slot {slot.index} mb {event.task.microbatch}",
            )
        )
        if slot.index not in legend:
            layers = f" layers {slot.layer_range}" if slot.layer_range else ""
            legend[slot.index] = LegendEntry(
                slot=slot.index,
                color=color,
                label=f"slot {slot.index}: {slot.kind.value}{layers}",
            )

    lanes_bottom = MARGIN_TOP + report.num_gpus * (LANE_HEIGHT + LANE_GAP)
    entries = [legend[i] for i in sorted(legend)]
    height = lanes_bottom + 30 + LEGEND_ROW * len(entries) + 10
    svg = JINJA_ENV.get_template(GANTT_TEMPLATE).render(
        title=title or f"{report.schedule.value} on {report.num_gpus} GPUs",
        width=WIDTH,
        height=height,
        margin_left=MARGIN_LEFT,
        margin_top=MARGIN_TOP,
        lane_height=LANE_HEIGHT,
        lane_gap=LANE_GAP,
        gpus=range(report.num_gpus),
        bars=bars,
        legend=entries,
        legend_top=lanes_bottom + 30,
        legend_row=LEGEND_ROW,
        makespan_ns=report.makespan_ns,
        bubble_ratio=_fmt(report.bubble_ratio * 100),
    )
    logger.debug(f"Rendered {len(bars)} bars for {report.schedule.value}")
    return svg


def write_gantt(report: SimReport, path: str, title: Optional[str] = None):
    with open(path, "w") as f:
        f.write(render_gantt(report, title))
