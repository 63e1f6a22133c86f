"""参数量与计算量统计"""

import logging
from collections import OrderedDict
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from bafnet.core.module import Module, ParamRegistry
from bafnet.core.profiler import FlopCounter
from bafnet.core.tensor import Tensor, no_grad
from bafnet.schemas.schemas import ComplexityReport, ModuleCost

logger = logging.getLogger(__name__)


def count_params(source: Union[Module, ParamRegistry]) -> int:
    registry = source.param_registry() if isinstance(source, Module) else source
    return registry.num_elements()


def _group(name: str, depth: int) -> str:
    return ".".join(name.split(".")[:depth]) if name else "<root>"


def count_flops(
    model: Module,
    input_shape: Sequence[int],
    dry_run: bool = True,
    depth: int = 2,
) -> ComplexityReport:
    """
    统计一次前向的 FLOPs 与 MACs

    约定：卷积、线性层与矩阵乘按 2·MAC 计，另加偏置加法；注意力按窗口计入矩阵乘。
    dry_run=True 时重型算子只按形状记账、输出全零，数值不参与统计。
    前向在评估模式下进行，BN 的滑动统计不会被修改。

    Args:
        depth: 按参数名的前几级聚合逐模块统计
    """
    shape: Tuple[int, ...] = tuple(int(s) for s in input_shape)
    was_training = model.training
    model.eval()
    dtype = model.parameters()[0].dtype if model.parameters() else np.float32
    try:
        with no_grad(), FlopCounter(dry_run=dry_run) as counter:
            model(Tensor(np.zeros(shape, dtype=dtype)))
    finally:
        model.train(was_training)

    params: Dict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        key = _group(name, depth)
        params[key] = params.get(key, 0) + p.size
    flops: Dict[str, int] = OrderedDict()
    macs: Dict[str, int] = OrderedDict()
    by_scope = counter.flops_by_scope()
    for scope, m in counter.macs.items():
        key = _group(scope, depth)
        macs[key] = macs.get(key, 0) + m
        flops[key] = flops.get(key, 0) + by_scope[scope]
    names = list(params) + [k for k in flops if k not in params]
    modules = [
        ModuleCost(name=k, params=params.get(k, 0), flops=flops.get(k, 0), macs=macs.get(k, 0))
        for k in names
    ]
    report = ComplexityReport(
        input_shape=shape, params=count_params(model),
        flops=counter.total_flops, macs=counter.total_macs, modules=modules,
    )
    logger.info(f"复杂度统计: 输入 {shape}, 参数 {report.params:,}, MACs {report.macs:,}, FLOPs {report.flops:,}")
    return report
