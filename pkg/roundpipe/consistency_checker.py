"""
Model of the asynchronous optimizer's consistency protocol.

Per layer and iteration T the GPU worker uploads the layer's parameters from the master copy (param_upload) and
later writes its gradients into the master gradient buffer (grad_write). The optimizer worker steps the layer
(opt_step, applying the gradients extracted in the previous round), copies the new weights into the master copy
(p_copy) and extracts the freshly written gradients (g_copy). Both workers run their actions sequentially:

    GPU worker:        param_upload(1..L, T), grad_write(L..1, T), then iteration T + 1
    optimizer worker:  opt_step(1..L, T), p_copy(1..L, T), g_copy(L..1, T), then round T + 1

The ordering constraints a correct protocol must enforce:

    1. param_upload(l, T) before p_copy(l, T)
    2. p_copy(l, T) before param_upload(l, T + 1)
    3. grad_write(l, T) before g_copy(l, T)
    4. g_copy(l, T) before grad_write(l, T + 1)
    5. opt_step(l, T) before p_copy(l, T) and g_copy(l, T), both before opt_step(l, T + 1)
"""
import heapq
import logging
from typing import Dict, List, Optional, Tuple

from roundpipe.math_utils import StateSpaceCapExceeded
from roundpipe.models import (
    ActionKind,
    DependencyEdge,
    DependencyGraph,
    ProtocolAction,
    ProtocolMode,
    ProtocolRun,
    ProtocolTimings,
    TimedAction,
    Verdict,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_STATES = 1_000_000

CONSTRAINT_NAMES = {
    1: "weight integrity",
    2: "torn weights",
    3: "incomplete gradients",
    4: "gradient integrity",
    5: "optimizer step semantics",
}

# (constraint, earlier action, later action)
Requirement = Tuple[int, ProtocolAction, ProtocolAction]


def _action(kind: ActionKind, layer: int, iteration: int) -> ProtocolAction:
    return ProtocolAction(kind=kind, layer=layer, iteration=iteration)


def gpu_program(num_layers: int, iteration: int) -> List[ProtocolAction]:
    layers = range(1, num_layers + 1)
    return [_action(ActionKind.PARAM_UPLOAD, l, iteration) for l in layers] + [
        _action(ActionKind.GRAD_WRITE, l, iteration) for l in reversed(layers)
    ]


def optimizer_program(num_layers: int, iteration: int) -> List[ProtocolAction]:
    layers = range(1, num_layers + 1)
    return (
        [_action(ActionKind.OPT_STEP, l, iteration) for l in layers]
        + [_action(ActionKind.P_COPY, l, iteration) for l in layers]
        + [_action(ActionKind.G_COPY, l, iteration) for l in reversed(layers)]
    )


def requirements(num_layers: int, iterations: int) -> List[Requirement]:
    """
    Every ordering the protocol must guarantee, independent of how a mode enforces it.
    """
    result = []
    for t in range(iterations):
        for l in range(1, num_layers + 1):
            upload = _action(ActionKind.PARAM_UPLOAD, l, t)
            write = _action(ActionKind.GRAD_WRITE, l, t)
            step = _action(ActionKind.OPT_STEP, l, t)
            p_copy = _action(ActionKind.P_COPY, l, t)
            g_copy = _action(ActionKind.G_COPY, l, t)
            result.append((1, upload, p_copy))
            result.append((3, write, g_copy))
            result.append((5, step, p_copy))
            result.append((5, step, g_copy))
            if t + 1 < iterations:
                result.append((2, p_copy, _action(ActionKind.PARAM_UPLOAD, l, t + 1)))
                result.append((4, g_copy, _action(ActionKind.GRAD_WRITE, l, t + 1)))
                next_step = _action(ActionKind.OPT_STEP, l, t + 1)
                result.append((5, p_copy, next_step))
                result.append((5, g_copy, next_step))
    return result


def _program_edges(program: List[ProtocolAction], reason: str) -> List[DependencyEdge]:
    return [
        DependencyEdge(src=a, dst=b, reason=reason) for a, b in zip(program, program[1:])
    ]


def _per_layer_edges(num_layers: int, iterations: int) -> List[DependencyEdge]:
    edges = []
    for t in range(iterations):
        for l in range(1, num_layers + 1):
            upload = _action(ActionKind.PARAM_UPLOAD, l, t)
            write = _action(ActionKind.GRAD_WRITE, l, t)
            p_copy = _action(ActionKind.P_COPY, l, t)
            g_copy = _action(ActionKind.G_COPY, l, t)
            edges.append(DependencyEdge(src=upload, dst=p_copy, constraint=1))
            edges.append(DependencyEdge(src=write, dst=g_copy, constraint=3))
            if t + 1 < iterations:
                next_upload = _action(ActionKind.PARAM_UPLOAD, l, t + 1)
                next_write = _action(ActionKind.GRAD_WRITE, l, t + 1)
                edges.append(DependencyEdge(src=p_copy, dst=next_upload, constraint=2))
                edges.append(DependencyEdge(src=g_copy, dst=next_write, constraint=4))
    return edges


def _per_model_edges(num_layers: int, iterations: int) -> List[DependencyEdge]:
    """One event per constraint and iteration, set once the whole model is done."""
    edges = []
    last = num_layers
    for t in range(iterations):
        edges.append(
            DependencyEdge(
                src=_action(ActionKind.PARAM_UPLOAD, last, t),
                dst=_action(ActionKind.P_COPY, 1, t),
                constraint=1,
            )
        )
        edges.append(
            DependencyEdge(
                src=_action(ActionKind.GRAD_WRITE, 1, t),
                dst=_action(ActionKind.G_COPY, last, t),
                constraint=3,
            )
        )
        if t + 1 < iterations:
            edges.append(
                DependencyEdge(
                    src=_action(ActionKind.P_COPY, last, t),
                    dst=_action(ActionKind.PARAM_UPLOAD, 1, t + 1),
                    constraint=2,
                )
            )
            edges.append(
                DependencyEdge(
                    src=_action(ActionKind.G_COPY, 1, t),
                    dst=_action(ActionKind.GRAD_WRITE, last, t + 1),
                    constraint=4,
                )
            )
    return edges


def _barrier_edges(num_layers: int, iterations: int) -> List[DependencyEdge]:
    """
    step() as a global barrier: copies start after all GPU work of the iteration,
    the next iteration starts after the copies.
    """
    edges = []
    for t in range(iterations):
        edges.append(
            DependencyEdge(
                src=_action(ActionKind.GRAD_WRITE, 1, t),
                dst=_action(ActionKind.P_COPY, 1, t),
                reason="barrier",
            )
        )
        if t + 1 < iterations:
            edges.append(
                DependencyEdge(
                    src=_action(ActionKind.G_COPY, 1, t),
                    dst=_action(ActionKind.PARAM_UPLOAD, 1, t + 1),
                    reason="barrier",
                )
            )
    return edges


def build_protocol(
    num_layers: int,
    iterations: int,
    mode: ProtocolMode,
    drop_constraint: Optional[int] = None,
) -> DependencyGraph:
    """
    Actions of both workers and the synchronization edges of a protocol mode.
    :param num_layers: layers L
    :param iterations: iterations T
    :param mode: blocking, event-per-model or event-per-layer
    :param drop_constraint: remove every edge enforcing this constraint (1..4)
    :return: DependencyGraph
    """
    if num_layers < 1 or iterations < 1:
        raise ValueError("layers and iterations must be at least 1")
    if drop_constraint is not None and drop_constraint not in (1, 2, 3, 4):
        raise ValueError(f"only edges of constraints 1-4 can be dropped, got {drop_constraint}")

    gpu = [a for t in range(iterations) for a in gpu_program(num_layers, t)]
    optimizer = [a for t in range(iterations) for a in optimizer_program(num_layers, t)]
    edges = _program_edges(gpu, "gpu program order") + _program_edges(
        optimizer, "optimizer program order"
    )
    if mode == ProtocolMode.BLOCKING:
        sync = _barrier_edges(num_layers, iterations)
    elif mode == ProtocolMode.EVENT_PER_MODEL:
        sync = _per_model_edges(num_layers, iterations)
    else:
        sync = _per_layer_edges(num_layers, iterations)
    if drop_constraint is not None:
        if not any(e.constraint == drop_constraint for e in sync):
            logger.warning(f"{mode.value} has no edges for constraint {drop_constraint}")
        sync = [e for e in sync if e.constraint != drop_constraint]

    actions = []
    for t in range(iterations):
        actions.extend(gpu_program(num_layers, t))
        actions.extend(optimizer_program(num_layers, t))
    graph = DependencyGraph(
        mode=mode,
        num_layers=num_layers,
        iterations=iterations,
        actions=actions,
        edges=edges + sync,
    )
    logger.debug(f"{mode.value}: {len(actions)} actions, {len(graph.edges)} edges")
    return graph


def first_violation(order: List[ProtocolAction], num_layers: int, iterations: int) -> Optional[int]:
    """
    Replay an interleaving and return the first constraint it violates, None if it satisfies all of them.
    """
    position = {action: index for index, action in enumerate(order)}
    worst = None
    for constraint, before, after in requirements(num_layers, iterations):
        if after not in position:
            continue
        if before not in position or position[before] > position[after]:
            if worst is None or position[after] < worst[0]:
                worst = (position[after], constraint)
    return None if worst is None else worst[1]


def check_all_interleavings(
    graph: DependencyGraph, max_states: int = DEFAULT_MAX_STATES
) -> Verdict:
    """
    Enumerate every linearization the graph admits and look for an ordering constraint it breaks.
    Executed-action sets are memoized, so each reachable state is expanded once.
    :param graph: protocol graph
    :param max_states: exploration limit
    :return: Verdict, with the witness interleaving up to the offending action on a violation
    :raises StateSpaceCapExceeded: if more than max_states states are reachable
    """
    index = {action: i for i, action in enumerate(graph.actions)}
    predecessors = [0] * len(graph.actions)
    for edge in graph.edges:
        predecessors[index[edge.dst]] |= 1 << index[edge.src]
    required: List[List[Tuple[int, int]]] = [[] for _ in graph.actions]
    for constraint, before, after in requirements(graph.num_layers, graph.iterations):
        required[index[after]].append((constraint, index[before]))

    complete = (1 << len(graph.actions)) - 1
    visited = set()
    path: List[int] = []

    def explore(executed: int) -> Optional[Tuple[int, List[int]]]:
        if executed == complete or executed in visited:
            return None
        visited.add(executed)
        if len(visited) > max_states:
            raise StateSpaceCapExceeded(
                f"more than {max_states} protocol states for {graph.mode.value}"
            )
        for i in range(len(graph.actions)):
            bit = 1 << i
            if executed & bit or predecessors[i] & ~executed:
                continue
            for constraint, before in required[i]:
                if not executed & (1 << before):
                    return constraint, path + [i]
            path.append(i)
            found = explore(executed | bit)
            path.pop()
            if found is not None:
                return found
        return None

    found = explore(0)
    if found is None:
        logger.info(f"{graph.mode.value}: all interleavings consistent ({len(visited)} states)")
        return Verdict(ok=True, states_explored=len(visited))
    constraint, witness = found
    logger.info(
        f"{graph.mode.value}: constraint {constraint} ({CONSTRAINT_NAMES[constraint]}) violated"
    )
    return Verdict(
        ok=False,
        constraint=constraint,
        witness=[graph.actions[i] for i in witness],
        states_explored=len(visited),
    )


def protocol_makespan(
    mode: ProtocolMode,
    num_layers: int,
    iterations: int,
    timings: ProtocolTimings,
) -> ProtocolRun:
    """
    Run every action as soon as its worker and its dependencies allow.
    :return: ProtocolRun with the makespan and per-action start and end times
    """
    graph = build_protocol(num_layers, iterations, mode)
    successors: Dict[ProtocolAction, List[ProtocolAction]] = {a: [] for a in graph.actions}
    unmet = {a: 0 for a in graph.actions}
    for edge in graph.edges:
        successors[edge.src].append(edge.dst)
        unmet[edge.dst] += 1

    order = {action: i for i, action in enumerate(graph.actions)}
    ready = {a: 0 for a in graph.actions}
    heap = [(0, order[a], a) for a in graph.actions if unmet[a] == 0]
    heapq.heapify(heap)
    timed = []
    while heap:
        start, _, action = heapq.heappop(heap)
        end = start + timings.duration(action.kind)
        timed.append(TimedAction(action=action, start_ns=start, end_ns=end))
        for successor in successors[action]:
            unmet[successor] -= 1
            ready[successor] = max(ready[successor], end)
            if unmet[successor] == 0:
                heapq.heappush(heap, (ready[successor], order[successor], successor))

    timed.sort(key=lambda t: (t.start_ns, order[t.action]))
    makespan = max(t.end_ns for t in timed)
    logger.info(f"{mode.value}: protocol makespan {makespan}ns")
    return ProtocolRun(mode=mode, makespan_ns=makespan, actions=timed)
