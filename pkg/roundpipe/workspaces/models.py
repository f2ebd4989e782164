from typing import Optional, Dict, List

from pydantic import BaseModel

from roundpipe.models import GpuBusy, RunConfig, ScheduleKind


class Workspace(BaseModel):
    """
    A directory of named experiments, stored as workspace.yml
    :param name: name of the workspace
    :param experiments: experiment name -> run config
    """

    name: str
    author: Optional[str] = None
    experiments: Optional[Dict[str, RunConfig]] = {}


class ExperimentResult(BaseModel):
    experiment: str
    config_hash: str
    config: RunConfig
    schedule: ScheduleKind
    num_stages: int
    makespan_ns: int
    bubble_ratio: float
    gpus: List[GpuBusy]
