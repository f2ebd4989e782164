import logging
from abc import ABC, abstractmethod
from typing import List

from roundpipe.models import ScheduleKind, ScheduleSpec, Task

logger = logging.getLogger(__name__)


class InvalidScheduleError(Exception):
    pass


class ScheduleGeneratorInterface(ABC):
    """
    A schedule generator turns a ScheduleSpec into the ordered task list the simulator executes.
    The order of a GPU's tasks in the list is the order the GPU runs them in.
    """

    kind: ScheduleKind

    # all schedules except the asynchronous one end each iteration with a flush barrier
    flushes: bool = True

    def check(self, spec: ScheduleSpec):
        """
        Validate a spec before generating tasks.
        :raises InvalidScheduleError: if the ScheduleSpec cannot be scheduled
        """
        if spec.kind != self.kind:
            raise InvalidScheduleError(
                f"{type(self).__name__} cannot schedule {spec.kind.value}"
            )

    @abstractmethod
    def num_slots(self, spec: ScheduleSpec) -> int:
        """Number of stage slots of one iteration."""
        pass

    @abstractmethod
    def generate(self, spec: ScheduleSpec) -> List[Task]:
        pass

    def __call__(self, spec: ScheduleSpec) -> List[Task]:
        self.check(spec)
        tasks = self.generate(spec)
        logger.info(f"Synthesized {len(tasks)} tasks for {spec.kind.value}")
        return tasks
