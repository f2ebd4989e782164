import json
import logging
import os
from collections import OrderedDict
from typing import List, Optional

import pydantic_yaml
import typer
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from roundpipe.models import RunConfig
from roundpipe.serialization import ConfigError, load_json, write_json
from roundpipe.simulator import simulate_run
from roundpipe.workspaces.models import ExperimentResult, Workspace

workspace_app = typer.Typer()
logger = logging.getLogger(__name__)

NO_COLOR = os.environ.get("NO_COLOR", False)

WORKSPACE_FILE_NAME = "workspace.yml"

EXAMPLE_EXPERIMENT = "example"


class WorkspaceNotFoundError(Exception):
    pass


def show_error(message: str):
    if NO_COLOR:
        typer.echo(f"❌ {message}", err=True)
    else:
        typer.echo(typer.style(f"❌ {message}", fg=typer.colors.RED), err=True)


def show_success(message: str):
    typer.echo(f"✅ {message}")


def write_to_workspace(workspace: Workspace):
    workspace_path = os.path.join(os.getcwd(), WORKSPACE_FILE_NAME)
    ordered_val = OrderedDict(json.loads(workspace.model_dump_json()))
    yaml.add_representer(
        OrderedDict,
        lambda dumper, data: dumper.represent_mapping(
            "tag:yaml.org,2002:map", data.items()
        ),
    )
    output = yaml.dump(ordered_val)
    with open(workspace_path, "w") as f:
        f.write(output)


def _current_workspace(fail_if_none: bool = True) -> Optional[Workspace]:
    """
    Return the current workspace.
    :param fail_if_none: if True, raise an exception if no workspace is found
    :return: the workspace
    """
    workspace_data = None
    workspace_path = os.path.join(os.getcwd(), WORKSPACE_FILE_NAME)
    if os.path.exists(workspace_path):
        with open(workspace_path, "r") as f:
            workspace_data = f.read()

    if fail_if_none and workspace_data is None:
        raise WorkspaceNotFoundError("No workspace found in the current directory")

    workspace = None
    if workspace_data is not None:
        workspace = pydantic_yaml.parse_yaml_raw_as(Workspace, workspace_data)
    return workspace


def _load_workspace() -> Workspace:
    try:
        return _current_workspace()
    except WorkspaceNotFoundError as e:
        show_error(str(e))
        raise typer.Exit(2)
    except ValidationError as e:
        show_error(f"Invalid {WORKSPACE_FILE_NAME}: {e}")
        raise typer.Exit(2)


def _result_path(experiment_name: str) -> str:
    return f"{experiment_name}.json"


def _load_experiment_result(experiment_name: str) -> Optional[ExperimentResult]:
    path = _result_path(experiment_name)
    if not os.path.exists(path):
        return None
    return ExperimentResult.model_validate(load_json(path))


def _experiment_needs_reexecution(workspace: Workspace, experiment_name: str) -> bool:
    """
    An experiment is re-executed when it has no stored result or its config changed since.
    """
    if experiment_name not in workspace.experiments:
        raise ValueError(f"Experiment {experiment_name} not found in the workspace")
    try:
        result = _load_experiment_result(experiment_name)
    except ValidationError:
        logger.info(f"Stored result of {experiment_name} is unreadable.")
        return True
    if result is None:
        logger.info(f"Experiment {experiment_name} not found in the file system.")
        return True
    if result.config_hash != workspace.experiments[experiment_name].hash():
        logger.info(f"Experiment {experiment_name} has a different config.")
        return True
    return False


def _execute_experiment(experiment_name: str, run: RunConfig) -> ExperimentResult:
    schedule_run = simulate_run(run)
    report = schedule_run.report
    return ExperimentResult(
        experiment=experiment_name,
        config_hash=run.hash(),
        config=run,
        schedule=report.schedule,
        num_stages=schedule_run.num_stages,
        makespan_ns=report.makespan_ns,
        bubble_ratio=report.bubble_ratio,
        gpus=report.gpus,
    )


@workspace_app.command()
def init(
    name: Optional[str] = typer.Option(None, help="Workspace name"),
    author: Optional[str] = typer.Option(None, help="Author"),
    example: bool = typer.Option(True, help="Add an example experiment"),
):
    """
    Initialize a new workspace in the current directory.
    """
    workspace_path = os.path.join(os.getcwd(), WORKSPACE_FILE_NAME)
    if os.path.exists(workspace_path):
        typer.confirm(
            "Workspace already exists. Do you want to overwrite it?", abort=True
        )

    if name is None:
        name = typer.prompt("Name", default=os.path.basename(os.getcwd()), type=str)
    if author is None:
        author = typer.prompt(
            "Author",
            default=os.environ.get("USER", os.environ.get("USERNAME", "")),
            type=str,
        )

    workspace = Workspace(name=name, author=author, experiments={})
    if example:
        workspace.experiments[EXAMPLE_EXPERIMENT] = RunConfig(
            model="qwen3-1.7b", gpu="rtx4090"
        )

    write_to_workspace(workspace)
    show_success(f"Workspace {name} created.")


@workspace_app.command()
def info():
    """Show general information about the workspace."""
    workspace = _load_workspace()
    typer.echo(f"Workspace: {workspace.name}")
    typer.echo(f"Author: {workspace.author}")

    table = Table()
    for column in ["Experiment", "Model", "GPU", "Schedule", "N", "M", "Result"]:
        table.add_column(column)
    for experiment_name, run in workspace.experiments.items():
        stored = os.path.exists(_result_path(experiment_name))
        table.add_row(
            experiment_name,
            run.model,
            run.gpu,
            run.schedule.value,
            str(run.num_gpus),
            str(run.num_microbatches),
            "stored" if stored else "-",
        )
    Console().print(table)


@workspace_app.command()
def execute(
    experiment_name: Optional[str] = typer.Argument(None),
    force_reexecution: bool = typer.Option(False, "--force"),
):
    """
    Execute an experiment or all experiments in the workspace.
    """
    workspace = _load_workspace()
    if experiment_name is None:
        names = list(workspace.experiments.keys())
    elif experiment_name not in workspace.experiments:
        show_error(f"Experiment {experiment_name} not found in the workspace.")
        raise typer.Exit(2)
    else:
        names = [experiment_name]

    for name in names:
        if not force_reexecution and not _experiment_needs_reexecution(workspace, name):
            typer.echo(f"Skipping experiment: {name}. (no changes)")
            continue
        typer.echo(f"Executing experiment: {name}")
        try:
            result = _execute_experiment(name, workspace.experiments[name])
        except (ConfigError, ValueError) as e:
            show_error(f"Experiment {name} failed: {e}")
            raise typer.Exit(2)
        write_json(result, _result_path(name))
        show_success(
            f"{name}: bubble {result.bubble_ratio * 100:.2f}%, makespan {result.makespan_ns} ns"
        )


@workspace_app.command()
def diff(experiment_names: List[str], only_differences: bool = False):
    """
    Show bubble ratio and makespan of several experiments side by side.
    """
    workspace = _load_workspace()
    if len(experiment_names) < 2:
        show_error("Please provide at least two experiment names.")
        raise typer.Exit(2)

    results = []
    for experiment_name in experiment_names:
        if experiment_name not in workspace.experiments:
            show_error(f"Experiment {experiment_name} not found in the workspace")
            raise typer.Exit(2)
        result = _load_experiment_result(experiment_name)
        if result is None:
            show_error(f"Experiment {experiment_name} has not been executed yet")
            raise typer.Exit(2)
        results.append(result)

    rows = {
        "schedule": [r.schedule.value for r in results],
        "model": [r.config.model for r in results],
        "stages": [str(r.num_stages) for r in results],
        "bubble": [f"{r.bubble_ratio * 100:.2f}%" for r in results],
        "makespan (ns)": [str(r.makespan_ns) for r in results],
    }

    table = Table()
    table.add_column("Metric")
    for experiment_name in experiment_names:
        table.add_column(experiment_name, justify="center")
    for metric, values in rows.items():
        all_same = len(set(values)) == 1
        if only_differences and all_same:
            continue
        table.add_row(metric, *values, style="green" if all_same else "red")
    Console().print(table)
