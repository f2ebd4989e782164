"""
Analytic per-layer cost model of a transformer layer under CPU offloading.

All byte counts assume fp16 elements; the factor 2 is folded into the constants.
"""
import logging
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, TypeAdapter, ValidationError

from roundpipe.models import (
    GpuSpec,
    HeadMode,
    LayerCost,
    ModelConfig,
    TransferDirection,
    TransferItem,
    Workload,
)
from roundpipe.serialization import ConfigError, load_structured_file

logger = logging.getLogger(__name__)

# ridge_batch searches b in [1, MAX_RIDGE_BATCH]
MAX_RIDGE_BATCH = 2**20

BACKWARD_TO_FORWARD_RATIO = 3


class MissingHeadCostError(ConfigError):
    pass


class IntensityComparison(BaseModel):
    oi_fwd: float
    oi_bwd: float
    bwd_bytes: int
    exceeds: bool


class RooflinePoint(BaseModel):
    micro_batch: int
    oi: float
    attainable_flops: float
    compute_bound: bool


def flops_fwd(cfg: ModelConfig, w: Workload) -> float:
    """
    Forward FLOPS of one transformer layer: projections, attention scores and the (MoE) MLP.
    :param cfg: model config
    :param w: workload
    :return: FLOPS
    """
    s, b, h = w.seq_len, w.micro_batch, cfg.hidden_dim
    a, k, m = cfg.num_heads, cfg.num_kv_heads, cfg.intermediate_dim
    # integer numerator over a keeps the result exact up to the final division
    numerator = 4 * s * b * h * h * (a + k) + a * (
        4 * b * s * s * h + 6 * s * b * h * m * cfg.active_experts
    )
    return numerator / a


def act_full_bytes(cfg: ModelConfig, w: Workload) -> int:
    """
    Activation bytes one layer keeps for its backward pass without recomputation.
    """
    s, b, h = w.seq_len, w.micro_batch, cfg.hidden_dim
    a, k = cfg.num_heads, cfg.num_kv_heads
    return (12 * a + 4 * k) * s * b * h // a + 6 * s * b * cfg.intermediate_dim * cfg.active_experts


def act_ckpt_bytes(cfg: ModelConfig, w: Workload) -> int:
    """Bytes of the layer input kept as a checkpoint (and passed between stages)."""
    return 2 * w.seq_len * w.micro_batch * cfg.hidden_dim


def recompute_time(cfg: ModelConfig, w: Workload, gpu: GpuSpec) -> float:
    return flops_fwd(cfg, w) / gpu.peak_fp16_flops


def reload_time(cfg: ModelConfig, w: Workload, gpu: GpuSpec) -> float:
    return act_full_bytes(cfg, w) / gpu.link_bandwidth


def layer_tensors(
    cfg: ModelConfig,
    layer: int = 1,
    direction: TransferDirection = TransferDirection.UPLOAD,
) -> List[TransferItem]:
    """
    Tensor inventory of one layer: attention projections, then gate/up/down for every expert.
    :param cfg: model config
    :param layer: 1-based layer id used in the tensor names
    :param direction: upload for parameters, download for gradients
    :return: list of TransferItem
    """
    h, m = cfg.hidden_dim, cfg.intermediate_dim
    kv_bytes = 2 * h * h * cfg.num_kv_heads // cfg.num_heads
    sizes = [
        ("attn.q", 2 * h * h),
        ("attn.k", kv_bytes),
        ("attn.v", kv_bytes),
        ("attn.o", 2 * h * h),
    ]
    if cfg.is_dense:
        sizes += [(f"mlp.{name}", 2 * h * m) for name in ("gate", "up", "down")]
    else:
        for e in range(cfg.total_experts):
            sizes += [
                (f"expert{e}.{name}", 2 * h * m) for name in ("gate", "up", "down")
            ]
    return [
        TransferItem(tensor_id=f"layer{layer}.{name}", bytes=size, direction=direction)
        for name, size in sizes
    ]


def param_bytes(cfg: ModelConfig) -> int:
    """Parameter bytes of one layer, all E experts included."""
    h, m = cfg.hidden_dim, cfg.intermediate_dim
    kv_bytes = 2 * h * h * cfg.num_kv_heads // cfg.num_heads
    return 4 * h * h + 2 * kv_bytes + 6 * h * m * cfg.total_experts


def upload_bytes_fwd(cfg: ModelConfig, w: Workload) -> int:
    """Bytes uploaded for one layer's forward: all weights plus the input activation."""
    return param_bytes(cfg) + act_ckpt_bytes(cfg, w)


def oi_fwd(cfg: ModelConfig, w: Workload) -> float:
    # the download (2bsh) never exceeds the upload, so the upload bounds the link
    return flops_fwd(cfg, w) / upload_bytes_fwd(cfg, w)


def oi_bwd_exceeds_fwd(cfg: ModelConfig, w: Workload) -> IntensityComparison:
    """
    Operational intensity of the backward pass (3x forward FLOPS over weights, input and output gradient).
    """
    bwd_bytes = upload_bytes_fwd(cfg, w) + act_ckpt_bytes(cfg, w)
    forward = oi_fwd(cfg, w)
    backward = BACKWARD_TO_FORWARD_RATIO * flops_fwd(cfg, w) / bwd_bytes
    return IntensityComparison(
        oi_fwd=forward,
        oi_bwd=backward,
        bwd_bytes=bwd_bytes,
        exceeds=backward > forward,
    )


def ridge_batch(cfg: ModelConfig, gpu: GpuSpec, seq_len: int) -> Optional[int]:
    """
    Smallest micro-batch size whose forward operational intensity reaches the ridge point of the GPU.
    :param cfg: model config
    :param gpu: gpu spec
    :param seq_len: sequence length
    :return: micro-batch size, None if no b <= MAX_RIDGE_BATCH suffices
    """
    ridge = gpu.ridge_point

    def reaches(b: int) -> bool:
        return oi_fwd(cfg, Workload(seq_len=seq_len, micro_batch=b)) >= ridge

    if not reaches(MAX_RIDGE_BATCH):
        logger.info(f"{cfg.name} does not reach the ridge point of {gpu.name}")
        return None
    lo, hi = 1, MAX_RIDGE_BATCH
    while lo < hi:
        mid = (lo + hi) // 2
        if reaches(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def oi_sweep(
    cfg: ModelConfig, gpu: GpuSpec, seq_len: int, batches: Sequence[int]
) -> List[RooflinePoint]:
    """
    Forward operational intensity over a list of micro-batch sizes.
    """
    b = np.asarray(batches, dtype=np.float64)
    s, h = float(seq_len), float(cfg.hidden_dim)
    a, k, m = float(cfg.num_heads), float(cfg.num_kv_heads), float(cfg.intermediate_dim)
    flops = (
        4 * s * b * h * h * (a + k) / a
        + 4 * b * s * s * h
        + 6 * s * b * h * m * cfg.active_experts
    )
    upload = param_bytes(cfg) + 2 * b * s * h
    oi = flops / upload
    attainable = np.minimum(gpu.peak_fp16_flops, oi * gpu.link_bandwidth)
    return [
        RooflinePoint(
            micro_batch=int(batch),
            oi=float(value),
            attainable_flops=float(att),
            compute_bound=bool(value >= gpu.ridge_point),
        )
        for batch, value, att in zip(batches, oi, attainable)
    ]


def _layer_cost(cfg: ModelConfig, w: Workload, gpu: GpuSpec, name: str) -> LayerCost:
    t_fwd = recompute_time(cfg, w, gpu)
    return LayerCost(
        name=name,
        t_fwd=t_fwd,
        t_bwd=BACKWARD_TO_FORWARD_RATIO * t_fwd,
        param_bytes=param_bytes(cfg),
        act_ckpt_bytes=act_ckpt_bytes(cfg, w),
        act_full_bytes=act_full_bytes(cfg, w),
    )


def head_cost(cfg: ModelConfig, w: Workload, gpu: GpuSpec) -> LayerCost:
    if not cfg.has_head_cost:
        raise MissingHeadCostError(f"Model {cfg.name} has no head cost configured")
    t_fwd = cfg.head_flops_per_token * w.tokens / gpu.peak_fp16_flops
    return LayerCost(
        name="head",
        t_fwd=t_fwd,
        t_bwd=BACKWARD_TO_FORWARD_RATIO * t_fwd,
        param_bytes=cfg.head_param_bytes or 0,
        act_ckpt_bytes=act_ckpt_bytes(cfg, w),
    )


def layer_costs(
    cfg: ModelConfig,
    w: Workload,
    gpu: GpuSpec,
    head: HeadMode = HeadMode.NONE,
) -> List[LayerCost]:
    """
    Synthetic per-layer costs, optionally followed by the head as layer L+1.
    :param cfg: model config
    :param w: workload
    :param gpu: gpu spec
    :param head: none, a copy of a transformer layer, or the head cost from the config
    :return: list of LayerCost
    """
    costs = [_layer_cost(cfg, w, gpu, f"layer{i}") for i in range(1, cfg.num_layers + 1)]
    if head == HeadMode.LAYER:
        costs.append(_layer_cost(cfg, w, gpu, "head"))
    elif head == HeadMode.CONFIG:
        costs.append(head_cost(cfg, w, gpu))
    logger.debug(f"{len(costs)} layer costs for {cfg.name} on {gpu.name}")
    return costs


def load_layer_costs(path: str) -> List[LayerCost]:
    """
    Load measured per-layer costs, either a list or an object with a "layers" list.
    """
    data = load_structured_file(path)
    if isinstance(data, dict):
        data = data.get("layers")
    if not isinstance(data, list):
        raise ConfigError(f"{path} does not contain a list of layer costs")
    try:
        return TypeAdapter(List[LayerCost]).validate_python(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid layer costs in {path}: {e}") from e
