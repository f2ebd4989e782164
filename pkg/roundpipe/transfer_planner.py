"""
Packing of parameter and gradient transfers into the per-micro-batch windows of a stage.
Large tensors are split into chunks, chunks are assigned longest first to the least loaded window.
"""
import heapq
import logging
from typing import Dict, List, Optional

from pydantic import BaseModel

from roundpipe.math_utils import StateSpaceCapExceeded, ceil_div
from roundpipe.models import (
    TransferDirection,
    TransferItem,
    TransferPlan,
    WindowAssignment,
)

logger = logging.getLogger(__name__)

# largest instance the exact makespan oracle accepts
MAX_ORACLE_CHUNKS = 12


class BoundCheck(BaseModel):
    lpt_makespan: int
    optimal_makespan: int
    ratio: float
    bound: float
    holds: bool


def default_max_chunk(items: List[TransferItem], num_windows: int) -> int:
    """ceil(total / M): every chunk fits into a perfectly balanced window."""
    return max(1, ceil_div(sum(item.bytes for item in items), num_windows))


def split_items(items: List[TransferItem], max_chunk_bytes: int) -> List[TransferItem]:
    """
    Split every item larger than max_chunk_bytes into ceil(bytes / max_chunk_bytes) near-equal chunks.
    """
    chunks = []
    for item in items:
        if item.bytes <= max_chunk_bytes:
            chunks.append(item)
            continue
        count = ceil_div(item.bytes, max_chunk_bytes)
        base, extra = divmod(item.bytes, count)
        for index in range(count):
            chunks.append(
                TransferItem(
                    tensor_id=item.tensor_id,
                    bytes=base + (1 if index < extra else 0),
                    direction=item.direction,
                    chunk_index=index,
                )
            )
    return chunks


def plan(
    items: List[TransferItem],
    num_windows: int,
    max_chunk_bytes: Optional[int] = None,
) -> TransferPlan:
    """
    Longest-processing-time-first assignment of transfer chunks to windows.
    :param items: transfers of one direction
    :param num_windows: number of windows M
    :param max_chunk_bytes: split threshold, defaults to ceil(total / M)
    :return: TransferPlan with windows 0..M-1
    """
    if num_windows < 1:
        raise ValueError("at least one transfer window is required")
    if max_chunk_bytes is None:
        max_chunk_bytes = default_max_chunk(items, num_windows)
    if max_chunk_bytes < 1:
        raise ValueError("max_chunk_bytes must be positive")
    chunks = split_items(items, max_chunk_bytes)
    chunks.sort(key=lambda c: (-c.bytes, c.tensor_id, c.chunk_index))

    windows = [WindowAssignment(id=i, items=[]) for i in range(num_windows)]
    heap = [(0, i) for i in range(num_windows)]
    for chunk in chunks:
        total, window_id = heapq.heappop(heap)
        windows[window_id].items.append(chunk)
        heapq.heappush(heap, (total + chunk.bytes, window_id))

    result = TransferPlan(windows=windows)
    logger.debug(
        f"{len(chunks)} chunks in {num_windows} windows, makespan {result.makespan_bytes} bytes"
    )
    return result


def plan_directions(
    items: List[TransferItem],
    num_windows: int,
    max_chunk_bytes: Optional[int] = None,
) -> Dict[TransferDirection, TransferPlan]:
    """Uploads and downloads use separate directions of the link and are planned independently."""
    return {
        direction: plan(
            [item for item in items if item.direction == direction],
            num_windows,
            max_chunk_bytes,
        )
        for direction in TransferDirection
    }


def optimal_makespan(sizes: List[int], num_windows: int) -> int:
    """
    Exact minimum makespan by depth-first search with load pruning.
    :raises StateSpaceCapExceeded: for more than MAX_ORACLE_CHUNKS sizes
    """
    if len(sizes) > MAX_ORACLE_CHUNKS:
        raise StateSpaceCapExceeded(
            f"{len(sizes)} chunks exceed the oracle limit of {MAX_ORACLE_CHUNKS}"
        )
    ordered = sorted(sizes, reverse=True)
    loads = [0] * num_windows
    best = [sum(ordered)]

    def search(position: int):
        if position == len(ordered):
            best[0] = min(best[0], max(loads))
            return
        size = ordered[position]
        tried = set()
        for window in range(num_windows):
            # windows with equal load are interchangeable
            if loads[window] in tried or loads[window] + size >= best[0]:
                continue
            tried.add(loads[window])
            loads[window] += size
            search(position + 1)
            loads[window] -= size

    search(0)
    return best[0]


def makespan_bound_check(
    items: List[TransferItem],
    num_windows: int,
    max_chunk_bytes: Optional[int] = None,
) -> BoundCheck:
    """
    Compare the LPT makespan with the optimum and Graham's bound 4/3 - 1/(3M).
    """
    if max_chunk_bytes is None:
        max_chunk_bytes = default_max_chunk(items, num_windows)
    chunks = split_items(items, max_chunk_bytes)
    lpt = plan(chunks, num_windows, max_chunk_bytes).makespan_bytes
    optimum = optimal_makespan([c.bytes for c in chunks], num_windows)
    ratio = lpt / optimum if optimum else 1.0
    bound = 4 / 3 - 1 / (3 * num_windows)
    return BoundCheck(
        lpt_makespan=lpt,
        optimal_makespan=optimum,
        ratio=ratio,
        bound=bound,
        holds=ratio <= bound + 1e-12,
    )
