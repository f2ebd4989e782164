import logging
import os
from contextlib import contextmanager
from typing import Any, Dict, List, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from roundpipe.config_loader import (
    AVAILABLE_MODELS,
    load_all_gpus,
    load_all_models,
    load_gpu_spec,
    load_model_config,
    load_run_config,
)
from roundpipe.consistency_checker import (
    CONSTRAINT_NAMES,
    DEFAULT_MAX_STATES,
    build_protocol,
    check_all_interleavings,
    protocol_makespan,
)
from roundpipe.cost_model import layer_costs, load_layer_costs, oi_sweep, ridge_batch
from roundpipe.gantt import write_gantt
from roundpipe.interfaces import InvalidScheduleError
from roundpipe.math_utils import StateSpaceCapExceeded
from roundpipe.models import (
    HeadMode,
    PartitionProblem,
    ProtocolMode,
    ProtocolTimings,
    RunConfig,
    ScheduleKind,
    TransferItem,
    Workload,
)
from roundpipe.partitioner import (
    InfeasiblePartitionError,
    optimal_partition,
    stage_time_ns,
)
from roundpipe.serialization import ConfigError, write_csv, write_json
from roundpipe.simulator import (
    DependencyCycleError,
    compare_runs,
    simulate_run,
    transfer_feasibility,
)
from roundpipe.transfer_planner import makespan_bound_check, plan as plan_transfers
from roundpipe.workspaces.cli import show_error, show_success, workspace_app

app = typer.Typer()

app.add_typer(workspace_app, name="workspace", help="Manage workspaces")

logger = logging.getLogger(__name__)

EXIT_INPUT_ERROR = 2
EXIT_INFEASIBLE = 3
EXIT_VIOLATION = 4
EXIT_CAP_EXCEEDED = 5

DEFAULT_BATCHES = "1,2,4,8,16,32,64,128"


@contextmanager
def exit_codes():
    """Map domain errors to exit codes."""
    try:
        yield
    except InfeasiblePartitionError as e:
        show_error(f"infeasible: {e}")
        raise typer.Exit(EXIT_INFEASIBLE)
    except StateSpaceCapExceeded as e:
        show_error(str(e))
        raise typer.Exit(EXIT_CAP_EXCEEDED)
    except (ConfigError, ValidationError, InvalidScheduleError, ValueError) as e:
        show_error(str(e))
        raise typer.Exit(EXIT_INPUT_ERROR)
    except DependencyCycleError as e:
        show_error(f"schedule cannot run: {e}")
        raise typer.Exit(EXIT_INPUT_ERROR)


def _parse_ints(value: str, what: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"{what} must be a comma separated list of integers, got {value}")


def _workload_costs(
    model: str,
    gpu: str,
    seq: int,
    micro_batch: int,
    head: HeadMode,
    layer_times: Optional[str],
    bandwidth: Optional[str] = None,
):
    if layer_times:
        return load_layer_costs(layer_times)
    return layer_costs(
        load_model_config(model),
        Workload(seq_len=seq, micro_batch=micro_batch),
        load_gpu_spec(gpu, bandwidth),
        head=head,
    )


@app.command()
def roofline(
    model: str = typer.Option("all", help="Bundled model name, config file or 'all'"),
    gpu: str = "rtx4090",
    seq: int = 2048,
    bandwidth: Optional[str] = typer.Option(None, help="Link bandwidth in bytes/s, 'inf' for unbounded"),
    batches: str = DEFAULT_BATCHES,
    json_path: Optional[str] = typer.Option(None, "--json"),
    csv_path: Optional[str] = typer.Option(None, "--csv"),
    log_level: str = "ERROR",
):
    """Operational intensity over micro-batch sizes and the batch size that reaches the ridge point."""
    logging.basicConfig(level=log_level)
    with exit_codes():
        spec = load_gpu_spec(gpu, bandwidth)
        names = AVAILABLE_MODELS if model == "all" else [model]
        configs = [load_model_config(name) for name in names]
        sizes = _parse_ints(batches, "batches")

        typer.echo(f"{spec.name}: ridge point {spec.ridge_point} FLOP/byte")
        table = Table()
        table.add_column("Model")
        table.add_column("Ridge batch", justify="right")
        for b in sizes:
            table.add_column(f"OI b={b}", justify="right")

        report: Dict[str, Any] = {
            "gpu": spec.name,
            "ridge_point": spec.ridge_point,
            "seq_len": seq,
            "models": [],
        }
        csv_rows = []
        for cfg in configs:
            batch = ridge_batch(cfg, spec, seq)
            points = oi_sweep(cfg, spec, seq, sizes)
            table.add_row(
                cfg.name,
                str(batch) if batch is not None else "-",
                *[f"{p.oi:.1f}" for p in points],
            )
            report["models"].append(
                {
                    "model": cfg.name,
                    "ridge_batch": batch,
                    "sweep": [p.model_dump() for p in points],
                }
            )
            csv_rows.extend(
                [cfg.name, p.micro_batch, p.oi, p.attainable_flops, p.compute_bound, batch]
                for p in points
            )
        Console().print(table)

        if json_path:
            write_json(report, json_path)
        if csv_path:
            write_csv(
                csv_path,
                ["model", "micro_batch", "oi", "attainable_flops", "compute_bound", "ridge_batch"],
                csv_rows,
            )


@app.command()
def partition(
    model: str = "qwen3-1.7b",
    gpu: str = "rtx4090",
    seq: int = 2048,
    micro_batch: int = 4,
    gpus: int = 8,
    microbatches: int = 16,
    head: HeadMode = HeadMode.LAYER,
    layer_times: Optional[str] = typer.Option(None, help="Measured layer costs (JSON or YAML)"),
    mem_limit: Optional[int] = typer.Option(None, help="Per-GPU memory limit in bytes"),
    residency_factor: float = 2.0,
    json_path: Optional[str] = typer.Option(None, "--json"),
    csv_path: Optional[str] = typer.Option(None, "--csv"),
    log_level: str = "ERROR",
):
    """Optimal asymmetric stage partition."""
    logging.basicConfig(level=log_level)
    with exit_codes():
        costs = _workload_costs(model, gpu, seq, micro_batch, head, layer_times)
        problem = PartitionProblem(
            layers=costs,
            num_gpus=gpus,
            num_microbatches=microbatches,
            mem_limit_bytes=mem_limit,
            residency_factor=residency_factor,
        )
        plan = optimal_partition(problem)

        typer.echo(f"S_f={plan.S_f} S_b={plan.S_b} S={plan.S} t_max={plan.t_max_ns}ns")
        table = Table()
        for column in ["Slot", "Kind", "Layers", "Time (ns)", "Headroom (ns)"]:
            table.add_column(column)
        stages = []
        for index, (kind, layer_range) in enumerate(plan.slots()):
            time_ns = stage_time_ns(kind, layer_range, costs)
            table.add_row(
                str(index),
                kind.value,
                str(layer_range),
                str(time_ns),
                str(plan.t_max_ns - time_ns),
            )
            stages.append(
                {
                    "slot": index,
                    "kind": kind.value,
                    "layers": [layer_range.start, layer_range.end],
                    "time_ns": time_ns,
                    "headroom_ns": plan.t_max_ns - time_ns,
                }
            )
        Console().print(table)

        if json_path:
            write_json({"plan": plan.model_dump(mode="json"), "stages": stages}, json_path)
        if csv_path:
            write_csv(
                csv_path,
                ["slot", "kind", "start", "end", "time_ns", "headroom_ns"],
                [
                    [s["slot"], s["kind"], *s["layers"], s["time_ns"], s["headroom_ns"]]
                    for s in stages
                ],
            )


def _run_config(config: Optional[str], overrides: Dict[str, Any]) -> RunConfig:
    """Values from the config file, replaced by every flag that was given."""
    data = load_run_config(config).model_dump() if config else {}
    data.update({key: value for key, value in overrides.items() if value is not None})
    data.setdefault("model", "qwen3-1.7b")
    data.setdefault("gpu", "rtx4090")
    return RunConfig.model_validate(data)


@app.command()
def simulate(
    config: Optional[str] = typer.Option(None, help="Run config (JSON or YAML)"),
    model: Optional[str] = None,
    gpu: Optional[str] = None,
    schedule: Optional[ScheduleKind] = None,
    seq: Optional[int] = None,
    micro_batch: Optional[int] = None,
    gpus: Optional[int] = None,
    microbatches: Optional[int] = None,
    round_size: Optional[int] = None,
    iterations: Optional[int] = None,
    stages_per_gpu: Optional[int] = None,
    head: Optional[HeadMode] = None,
    layer_times: Optional[str] = None,
    optimizer_delay_ns: Optional[int] = None,
    json_path: Optional[str] = typer.Option(None, "--json"),
    csv_path: Optional[str] = typer.Option(None, "--csv"),
    svg_path: Optional[str] = typer.Option(None, "--svg"),
    log_level: str = "ERROR",
):
    """Simulate one schedule and report its timeline and bubble ratio."""
    logging.basicConfig(level=log_level)
    with exit_codes():
        run = _run_config(
            config,
            {
                "model": model,
                "gpu": gpu,
                "schedule": schedule,
                "seq_len": seq,
                "micro_batch": micro_batch,
                "num_gpus": gpus,
                "num_microbatches": microbatches,
                "round_size": round_size,
                "iterations": iterations,
                "stages_per_gpu": stages_per_gpu,
                "head": head,
                "layer_times": layer_times,
                "optimizer_delay_ns": optimizer_delay_ns,
                "json_path": json_path,
                "csv_path": csv_path,
                "svg_path": svg_path,
            },
        )
        schedule_run = simulate_run(run)
        report = schedule_run.report

        table = Table()
        for column in ["GPU", "Busy (ns)", "Utilization"]:
            table.add_column(column)
        for busy in report.gpus:
            share = busy.busy_ns / report.makespan_ns if report.makespan_ns else 0.0
            table.add_row(str(busy.id), str(busy.busy_ns), f"{share * 100:.2f}%")
        Console().print(table)
        show_success(
            f"{report.schedule.value}: {schedule_run.num_stages} stages, makespan {report.makespan_ns} ns, "
            f"bubble {report.bubble_ratio * 100:.2f}%"
        )

        if run.json_path:
            write_json(report.to_report(), run.json_path)
        if run.csv_path:
            write_csv(
                run.csv_path,
                ["iter", "slot", "mb", "gpu", "start_ns", "end_ns", "kind"],
                [list(event.values()) for event in report.to_report()["events"]],
            )
        if run.svg_path:
            write_gantt(report, run.svg_path)


def _chart_path(path: str, model: str, kind: ScheduleKind) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}-{model}-{kind.value}{ext or '.svg'}"


@app.command()
def compare(
    models: str = typer.Option("all", help="Comma separated model names or 'all'"),
    gpu: str = "rtx4090",
    seq: int = 2048,
    micro_batch: int = 4,
    gpus: int = 8,
    microbatches: int = 16,
    schedules: str = typer.Option("all", help="Comma separated schedule kinds or 'all'"),
    head: HeadMode = HeadMode.LAYER,
    iterations: int = 3,
    stages_per_gpu: Optional[int] = typer.Option(
        None, help="Stages per GPU of the looped baselines, the best count per model when omitted"
    ),
    json_path: Optional[str] = typer.Option(None, "--json"),
    csv_path: Optional[str] = typer.Option(None, "--csv"),
    svg_path: Optional[str] = typer.Option(
        None, "--svg", help="Gantt charts, one per model and schedule, named after this path"
    ),
    log_level: str = "ERROR",
):
    """Bubble ratios of all schedules on the same layer costs, with the closed form in brackets."""
    logging.basicConfig(level=log_level)
    with exit_codes():
        names = AVAILABLE_MODELS if models == "all" else models.split(",")
        kinds = (
            list(ScheduleKind)
            if schedules == "all"
            else [ScheduleKind(s) for s in schedules.split(",")]
        )
        spec = load_gpu_spec(gpu)
        workload = Workload(seq_len=seq, micro_batch=micro_batch)

        table = Table()
        table.add_column("Model")
        for kind in kinds:
            table.add_column(kind.value, justify="right")
        rows = []
        for reference in names:
            cfg = load_model_config(reference)
            costs = layer_costs(cfg, workload, spec, head=head)
            results = compare_runs(
                cfg.name,
                costs,
                kinds,
                num_gpus=gpus,
                num_microbatches=microbatches,
                iterations=iterations,
                stages_per_gpu=stages_per_gpu,
            )
            cells = []
            for row, _ in results:
                cell = f"{row.bubble_ratio * 100:.2f}%"
                if row.closed_form is not None:
                    cell += f" ({row.closed_form * 100:.2f}%)"
                cells.append(cell)
            table.add_row(cfg.name, *cells)
            rows.extend(row for row, _ in results)
            if svg_path:
                for row, run in results:
                    write_gantt(
                        run.report,
                        _chart_path(svg_path, cfg.name, row.schedule),
                        title=f"{cfg.name}: {row.schedule.value} on {gpus} GPUs",
                    )
        Console().print(table)

        if json_path:
            write_json({"rows": [row.model_dump(mode="json") for row in rows]}, json_path)
        if csv_path:
            write_csv(
                csv_path,
                ["model", "schedule", "num_stages", "makespan_ns", "bubble_ratio", "closed_form"],
                [
                    [r.model, r.schedule.value, r.num_stages, r.makespan_ns, r.bubble_ratio, r.closed_form]
                    for r in rows
                ],
            )


@app.command(name="plan-transfers")
def plan_transfers_command(
    sizes: Optional[str] = typer.Option(None, help="Comma separated transfer sizes in bytes"),
    windows: int = 1,
    max_chunk: Optional[int] = typer.Option(None, help="Split threshold in bytes"),
    check_bound: bool = typer.Option(False, help="Compare with the optimal makespan"),
    model: Optional[str] = typer.Option(None, help="Check the transfer windows of a model instead"),
    gpu: str = "rtx4090",
    seq: int = 2048,
    micro_batch: int = 4,
    gpus: int = 8,
    microbatches: int = 16,
    head: HeadMode = HeadMode.LAYER,
    bandwidth: Optional[str] = None,
    window_offset: int = 1,
    stage_windows: Optional[int] = typer.Option(
        None, help="Transfer windows per stage, defaults to the micro-batch count"
    ),
    json_path: Optional[str] = typer.Option(None, "--json"),
    csv_path: Optional[str] = typer.Option(None, "--csv"),
    log_level: str = "ERROR",
):
    """
    Pack transfer sizes into windows, or check that a model's parameter transfers fit its stage windows.
    """
    logging.basicConfig(level=log_level)
    with exit_codes():
        if sizes is not None:
            _plan_sizes(sizes, windows, max_chunk, check_bound, json_path, csv_path)
        elif model is not None:
            _check_windows(
                model, gpu, seq, micro_batch, gpus, microbatches, head, bandwidth, window_offset,
                stage_windows, json_path, csv_path,
            )
        else:
            raise ValueError("Either --sizes or --model is required")


def _plan_sizes(
    sizes: str,
    windows: int,
    max_chunk: Optional[int],
    check_bound: bool,
    json_path: Optional[str],
    csv_path: Optional[str],
):
    items = [
        TransferItem(tensor_id=f"t{i}", bytes=size)
        for i, size in enumerate(_parse_ints(sizes, "sizes"))
    ]
    result = plan_transfers(items, windows, max_chunk)
    table = Table()
    for column in ["Window", "Bytes", "Items"]:
        table.add_column(column)
    for window in result.windows:
        table.add_row(
            str(window.id),
            str(window.total_bytes),
            ", ".join(f"{i.tensor_id}[{i.chunk_index}]={i.bytes}" for i in window.items),
        )
    Console().print(table)
    typer.echo(f"makespan {result.makespan_bytes}")

    report = result.to_report()
    if check_bound:
        bound = makespan_bound_check(items, windows, max_chunk)
        typer.echo(
            f"optimal {bound.optimal_makespan}, ratio {bound.ratio:.4f} <= {bound.bound:.4f}"
        )
        report["bound_check"] = bound.model_dump()
    if json_path:
        write_json(report, json_path)
    if csv_path:
        write_csv(
            csv_path,
            ["window", "tensor_id", "chunk_index", "bytes"],
            [
                [window.id, item.tensor_id, item.chunk_index, item.bytes]
                for window in result.windows
                for item in window.items
            ],
        )


def _check_windows(
    model: str,
    gpu: str,
    seq: int,
    micro_batch: int,
    gpus: int,
    microbatches: int,
    head: HeadMode,
    bandwidth: Optional[str],
    window_offset: int,
    stage_windows: Optional[int],
    json_path: Optional[str],
    csv_path: Optional[str],
):
    spec = load_gpu_spec(gpu, bandwidth)
    costs = layer_costs(
        load_model_config(model), Workload(seq_len=seq, micro_batch=micro_batch), spec, head=head
    )
    plan = optimal_partition(
        PartitionProblem(layers=costs, num_gpus=gpus, num_microbatches=microbatches)
    )
    if stage_windows is None:
        stage_windows = microbatches
    if stage_windows < 1:
        raise ValueError(f"stage windows must be positive, got {stage_windows}")
    verdicts = transfer_feasibility(plan, costs, spec, stage_windows, window_offset)

    table = Table()
    for column in ["Slot", "Kind", "Layers", "Window (ns)", "Upload", "Download", "Feasible"]:
        table.add_column(column)
    for v in verdicts:
        table.add_row(
            str(v.stage_index),
            v.kind.value,
            str(v.layer_range),
            str(v.window_ns),
            str(v.upload_bytes),
            str(v.download_bytes),
            "yes" if v.feasible else "no",
            style=None if v.feasible else "red",
        )
    Console().print(table)
    if json_path:
        write_json({"verdicts": [v.model_dump(mode="json") for v in verdicts]}, json_path)
    if csv_path:
        write_csv(
            csv_path,
            ["slot", "kind", "start", "end", "window_ns", "upload_bytes", "download_bytes", "feasible"],
            [
                [
                    v.stage_index,
                    v.kind.value,
                    v.layer_range.start,
                    v.layer_range.end,
                    v.window_ns,
                    v.upload_bytes,
                    v.download_bytes,
                    v.feasible,
                ]
                for v in verdicts
            ],
        )

    infeasible = [v.stage_index for v in verdicts if not v.feasible]
    if infeasible:
        show_error(f"infeasible transfer windows in slots {infeasible}")
        raise typer.Exit(EXIT_INFEASIBLE)
    show_success("all transfer windows feasible")


@app.command(name="verify-consistency")
def verify_consistency(
    layers: int = 2,
    iters: int = 2,
    mode: ProtocolMode = ProtocolMode.EVENT_PER_LAYER,
    drop_edge: Optional[int] = typer.Option(None, min=1, max=4, help="Remove the edges of one constraint"),
    max_states: int = DEFAULT_MAX_STATES,
    timings: bool = typer.Option(False, help="Also compare the makespan of all modes"),
    json_path: Optional[str] = typer.Option(None, "--json"),
    csv_path: Optional[str] = typer.Option(None, "--csv", help="Witness interleaving as CSV"),
    log_level: str = "ERROR",
):
    """Check every interleaving of the optimizer consistency protocol."""
    logging.basicConfig(level=log_level)
    with exit_codes():
        graph = build_protocol(layers, iters, mode, drop_constraint=drop_edge)
        verdict = check_all_interleavings(graph, max_states=max_states)
        report: Dict[str, Any] = {"verdict": verdict.model_dump(mode="json")}

        if timings:
            durations = ProtocolTimings()
            table = Table()
            table.add_column("Mode")
            table.add_column("Makespan (ns)", justify="right")
            report["makespans"] = {}
            for protocol_mode in ProtocolMode:
                run = protocol_makespan(protocol_mode, layers, iters, durations)
                table.add_row(protocol_mode.value, str(run.makespan_ns))
                report["makespans"][protocol_mode.value] = run.makespan_ns
            Console().print(table)

        if json_path:
            write_json(report, json_path)
        if csv_path:
            write_csv(
                csv_path,
                ["position", "kind", "layer", "iteration", "actor"],
                [
                    [i, a.kind.value, a.layer, a.iteration, a.actor.value]
                    for i, a in enumerate(verdict.witness)
                ],
            )

    if not verdict.ok:
        show_error(
            f"constraint {verdict.constraint} ({CONSTRAINT_NAMES[verdict.constraint]}) violated by:"
        )
        for action in verdict.witness:
            typer.echo(f"  {action}")
        raise typer.Exit(EXIT_VIOLATION)
    show_success(f"ok ({verdict.states_explored} states)")


@app.command()
def configs(
    json_path: Optional[str] = typer.Option(None, "--json"),
    log_level: str = "ERROR",
):
    """List the bundled models and GPUs."""
    logging.basicConfig(level=log_level)
    with exit_codes():
        models = load_all_models()
        gpu_specs = load_all_gpus()

    table = Table(title="Models")
    for column in ["Name", "h", "a", "k", "m", "E_act/E", "Layers"]:
        table.add_column(column)
    for name, cfg in models.items():
        table.add_row(
            name,
            str(cfg.hidden_dim),
            str(cfg.num_heads),
            str(cfg.num_kv_heads),
            str(cfg.intermediate_dim),
            f"{cfg.active_experts}/{cfg.total_experts}",
            str(cfg.num_layers),
        )
    Console().print(table)

    table = Table(title="GPUs")
    for column in ["Name", "FP16 FLOPS", "Memory (bytes)", "Link (bytes/s)", "Ridge point"]:
        table.add_column(column)
    for name, spec in gpu_specs.items():
        table.add_row(
            name,
            f"{spec.peak_fp16_flops:.4g}",
            str(spec.memory_bytes),
            f"{spec.link_bandwidth:.4g}",
            f"{spec.ridge_point:.1f}",
        )
    Console().print(table)

    if json_path:
        write_json(
            {
                "models": {n: c.model_dump(mode="json") for n, c in models.items()},
                "gpus": {n: g.model_dump(mode="json") for n, g in gpu_specs.items()},
            },
            json_path,
        )


if __name__ == "__main__":
    app()
