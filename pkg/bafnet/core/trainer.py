"""
训练、评估、推理与模型检查

train 按 epoch 循环：增强 → 前向 → 混合损失 → 反向 → AdamW（逐步余弦学习率）；
每个 epoch 的打乱与增强只由 (seed, epoch) 决定，因此从 epoch 边界的检查点恢复后与不中断训练逐位一致。
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from bafnet.core import functional as F
from bafnet.core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from bafnet.core.complexity import count_flops, count_params
from bafnet.core.data import (
    DEFAULT_PALETTE,
    TileSample,
    augment,
    predict_probs,
    tiled_predict,
    tta_predict,
)
from bafnet.core.errors import CheckpointError, ConfigError, DataError, NumericError
from bafnet.core.fusion import BafnetModel, build_model
from bafnet.core.gradcheck import GradcheckResult, gradcheck
from bafnet.core.losses import segmentation_loss
from bafnet.core.metrics import ConfusionMatrix, build_report
from bafnet.core.module import Module
from bafnet.core.optim import AdamW, cosine_lr
from bafnet.core.remote_local import CONTEXT_NAMES, WindowAttention
from bafnet.core.tensor import Tensor, default_dtype, no_grad
from bafnet.core.dataset import Prefetcher, iterate_batches
from bafnet.schemas.schemas import (
    CLASS_NAMES,
    ComplexityReport,
    EpochRecord,
    LossReport,
    MetricsReport,
    ModelConfig,
    TrainConfig,
    TrainHistory,
)
from bafnet.utils.file_utils import write_tensor_archive
from bafnet.utils.image_utils import normalize_map, write_gray, write_rgb

logger = logging.getLogger(__name__)
console = Console()


@dataclass
class TrainResult:
    model: BafnetModel
    optimizer: AdamW
    history: TrainHistory
    checkpoint_path: Optional[str] = None


# ==================================================================== 训练
def random_crop(sample: TileSample, size: int, rng: np.random.Generator) -> TileSample:
    h, w = sample.mask.shape
    if h <= size and w <= size:
        return sample
    th, tw = min(h, size), min(w, size)
    y = int(rng.integers(0, h - th + 1))
    x = int(rng.integers(0, w - tw + 1))
    return TileSample(
        image=sample.image[:, y:y + th, x:x + tw].copy(), mask=sample.mask[y:y + th, x:x + tw].copy(),
        source=sample.source, offset=(sample.offset[0] + y, sample.offset[1] + x),
    )


def _transform(config: TrainConfig) -> Callable[[TileSample, np.random.Generator], TileSample]:
    def apply(sample: TileSample, rng: np.random.Generator) -> TileSample:
        return augment(random_crop(sample, config.crop_size, rng), rng, config, config.ignore_index)
    return apply


def epoch_generator(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _check_dataset(samples: Sequence[TileSample], num_classes: int, ignore_index: int) -> None:
    if not samples:
        raise DataError("训练集为空")
    for s in samples:
        labels = s.mask[s.mask != ignore_index]
        if labels.size and int(labels.max()) >= num_classes:
            raise DataError(f"样本 {s.source} 含类别 {int(labels.max())}，超出模型类别数 {num_classes}")


def train_step(
    model: BafnetModel,
    optimizer: AdamW,
    images: np.ndarray,
    masks: np.ndarray,
    lr: float,
    config: TrainConfig,
) -> Tuple[LossReport, float]:
    """
    单步训练

    Raises:
        NumericError: 损失或梯度出现 NaN/Inf，诊断信息包含当前学习率与梯度范数
    """
    dtype = optimizer.params[0].dtype if optimizer.params else np.float32
    exclude = None if config.loss_include_clutter else config.clutter_index
    optimizer.zero_grad()
    try:
        logits = model(Tensor(images.astype(dtype, copy=False)))
        loss = segmentation_loss(
            logits, masks, model.config.num_classes, config.loss_mode, config.ignore_index, exclude,
        )
        loss.total.backward()
    except NumericError as e:
        raise NumericError(f"前向/反向出现非有限值: {e}", {"lr": lr, "grad_norm": optimizer.grad_norm()}) from e
    grad_norm = optimizer.grad_norm()
    report = loss.report()
    if not (math.isfinite(report.total) and math.isfinite(grad_norm)):
        raise NumericError("损失或梯度出现 NaN/Inf，训练中止", {"lr": lr, "grad_norm": grad_norm, "loss": report.total})
    optimizer.step(lr)
    return report, grad_norm


def _progress(enabled: bool) -> Progress:
    return Progress(
        TextColumn("[bold]{task.description}"), BarColumn(),
        TextColumn("{task.completed}/{task.total}"), TextColumn("{task.fields[status]}"),
        TimeElapsedColumn(), console=console, disable=not enabled, transient=False,
    )


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_samples: Sequence[TileSample],
    val_samples: Optional[Sequence[TileSample]] = None,
    out: Optional[str] = None,
    resume: Optional[str] = None,
    show_progress: bool = False,
    until_epoch: Optional[int] = None,
) -> TrainResult:
    """
    训练模型

    Args:
        out: 检查点路径；每个 epoch 结束时覆盖写入
        resume: 从该检查点继续；其模型配置哈希必须与 model_config 一致
        until_epoch: 训练到该 epoch 后提前返回；学习率调度仍按 train_config.epochs 计算

    Raises:
        ConfigError: 未给定 seed
        DataError: 训练集为空或类别超出范围
        NumericError: 出现 NaN/Inf
    """
    if train_config.seed is None:
        raise ConfigError("训练必须显式给定 seed")
    _check_dataset(train_samples, model_config.num_classes, train_config.ignore_index)
    seed = train_config.seed
    dtype = np.dtype(train_config.precision)
    history = TrainHistory()
    start_epoch = 0
    with default_dtype(dtype):
        if resume:
            ckpt = load_checkpoint(resume, expected=model_config)
            model = ckpt.build_model()
            if model.parameters()[0].dtype != dtype:
                raise CheckpointError(f"检查点精度 {ckpt.dtype} 与配置精度 {train_config.precision} 不符")
            start_epoch = ckpt.epoch
            history = TrainHistory(records=[EpochRecord(**r) for r in ckpt.history])
        else:
            model = build_model(model_config)
    optimizer = AdamW(
        model.parameters(), lr=train_config.lr0, betas=(train_config.beta1, train_config.beta2),
        eps=train_config.adam_eps, weight_decay=train_config.weight_decay,
    )
    if resume:
        ckpt.restore_optimizer(optimizer)
        logger.info(f"从检查点恢复训练: {resume}（已完成 {start_epoch} 个 epoch）")

    steps_per_epoch = math.ceil(len(train_samples) / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    transform = _transform(train_config)
    logger.info(
        f"开始训练: {len(train_samples)} 个样本, batch {train_config.batch_size}, "
        f"{train_config.epochs} 个 epoch, 共 {total_steps} 步, 精度 {train_config.precision}"
    )
    with _progress(show_progress) as progress:
        task = progress.add_task("train", total=total_steps, completed=start_epoch * steps_per_epoch, status="")
        last_epoch = train_config.epochs if until_epoch is None else min(until_epoch, train_config.epochs)
        for epoch in range(start_epoch, last_epoch):
            model.train()
            rng = epoch_generator(seed, epoch)
            batches = iterate_batches(train_samples, train_config.batch_size, rng, transform)
            if train_config.prefetch > 0:
                batches = Prefetcher(batches, train_config.prefetch)
            reports: List[LossReport] = []
            norms: List[float] = []
            lr = cosine_lr(epoch * steps_per_epoch, total_steps, train_config.lr0)
            try:
                for i, (images, masks) in enumerate(batches):
                    step = epoch * steps_per_epoch + i
                    lr = cosine_lr(step, total_steps, train_config.lr0)
                    report, gn = train_step(model, optimizer, images, masks, lr, train_config)
                    reports.append(report)
                    norms.append(gn)
                    if train_config.log_every and step % train_config.log_every == 0:
                        logger.debug(f"step {step}: lr={lr:.3e}, loss={report.total:.4f}, grad_norm={gn:.3e}")
                    progress.update(task, advance=1, status=f"epoch {epoch + 1} loss {report.total:.4f}")
            except NumericError as e:
                logger.error(f"训练在 epoch {epoch + 1} 中止: {e}")
                raise
            finally:
                if isinstance(batches, Prefetcher):
                    batches.close()

            ce = float(np.mean([r.ce for r in reports]))
            dice = float(np.mean([r.dice for r in reports]))
            val_miou = None
            if val_samples:
                val_miou = evaluate_model(model, val_samples, train_config).miou
            record = EpochRecord(
                epoch=epoch + 1, lr=lr, loss=LossReport(ce=ce, dice=dice, total=ce + dice),
                grad_norm=float(np.mean(norms)), val_miou=val_miou,
            )
            history.records.append(record)
            val_text = f", 验证 mIoU {val_miou:.4f}" if val_miou is not None else ""
            logger.info(f"epoch {epoch + 1}/{train_config.epochs} 完成: 损失 {record.loss.total:.4f}{val_text}")
            if out:
                save_checkpoint(
                    out, model, optimizer, epoch=epoch + 1, step=(epoch + 1) * steps_per_epoch,
                    rng=epoch_generator(seed, epoch + 1), train_config=train_config,
                    history=[r.model_dump(mode="json") for r in history.records],
                )
    return TrainResult(model=model, optimizer=optimizer, history=history, checkpoint_path=out)


# ==================================================================== 评估
def _predictor(model: Module, config: TrainConfig, tta: bool) -> Callable[[np.ndarray], np.ndarray]:
    if tta:
        return lambda batch: tta_predict(model, batch, config.tta_scales, config.tta_flips)
    return lambda batch: predict_probs(model, batch)


def _input_multiple(model: Module) -> int:
    config = getattr(model, "config", None)
    return config.input_multiple if config is not None else 1


def predict_image(model: Module, image: np.ndarray, config: TrainConfig, num_classes: int, tta: bool = False) -> np.ndarray:
    """
    (3,H,W) -> (C,H,W) 概率

    尺寸满足网络倍数且不超过切片大小时整幅推理，否则切片推理后拼接。
    """
    multiple = _input_multiple(model)
    predict = _predictor(model, config, tta)
    size = max(multiple, config.crop_size // multiple * multiple)
    h, w = image.shape[1:]
    if h % multiple == 0 and w % multiple == 0 and h <= size and w <= size:
        return predict(image[None])[0]
    return tiled_predict(predict, image, num_classes, size, size)


def _num_classes(model: Module) -> int:
    config = getattr(model, "config", None)
    return config.num_classes if config is not None else len(CLASS_NAMES)


def _evaluate_shard(model: Module, samples: Sequence[TileSample], config: TrainConfig, num_classes: int, tta: bool) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes, ignore_index=config.ignore_index)
    for s in samples:
        probs = predict_image(model, s.image, config, num_classes, tta)
        cm.accumulate(np.argmax(probs, axis=0), s.mask)
    return cm


def evaluate_model(
    model: Module,
    samples: Sequence[TileSample],
    config: Optional[TrainConfig] = None,
    tta: bool = False,
    workers: int = 1,
    dataset_classes: Optional[int] = None,
) -> MetricsReport:
    """
    逐样本推理（可选 TTA）并累加混淆矩阵

    workers > 1 时按连续区间把样本分给多个线程，各自累加后按区间顺序合并。

    Raises:
        DataError: 数据集类别数与模型不符，或样本标签超出模型类别数
    """
    config = config or TrainConfig()
    num_classes = _num_classes(model)
    if dataset_classes is not None and dataset_classes != num_classes:
        raise DataError(f"数据集类别数 {dataset_classes} 与模型类别数 {num_classes} 不符")
    if not samples:
        raise DataError("评估集为空")
    for s in samples:
        labels = s.mask[s.mask != config.ignore_index]
        if labels.size and int(labels.max()) >= num_classes:
            raise DataError(f"样本 {s.source} 含类别 {int(labels.max())}，模型只有 {num_classes} 类")

    was_training = model.training
    model.eval()
    try:
        workers = max(1, min(workers, len(samples)))
        if workers == 1:
            cm = _evaluate_shard(model, samples, config, num_classes, tta)
        else:
            bounds = np.linspace(0, len(samples), workers + 1).astype(int)
            shards = [samples[bounds[i]:bounds[i + 1]] for i in range(workers)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda shard: _evaluate_shard(model, shard, config, num_classes, tta), shards))
            cm = parts[0]
            for part in parts[1:]:
                cm = cm.merge(part)
    finally:
        model.train(was_training)
    report = build_report(cm, config.eval_classes, tta=tta)
    logger.info(f"评估完成: {len(samples)} 个样本, OA {report.oa:.4f}, mIoU {report.miou:.4f}, mean F1 {report.mean_f1:.4f}")
    return report


def evaluate(
    checkpoint: Union[str, Checkpoint],
    samples: Sequence[TileSample],
    config: Optional[TrainConfig] = None,
    tta: bool = False,
    workers: int = 1,
    dataset_classes: Optional[int] = None,
) -> MetricsReport:
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, str) else checkpoint
    config = config or ckpt.train_config or TrainConfig()
    model = ckpt.build_model()
    report = evaluate_model(model, samples, config, tta, workers, dataset_classes)
    return report.model_copy(update={"params": count_params(model)})


def render_metrics(report: MetricsReport) -> Table:
    table = Table(title="评估结果" + ("（TTA）" if report.tta else ""))
    for col in ("class", "IoU", "F1", "precision", "recall", "support"):
        table.add_column(col, justify="right" if col != "class" else "left")
    for m in report.per_class:
        name = f"{m.name}*" if m.flagged else m.name
        table.add_row(name, f"{m.iou:.4f}", f"{m.f1:.4f}", f"{m.precision:.4f}", f"{m.recall:.4f}", str(m.support))
    table.add_section()
    table.add_row("OA", f"{report.oa:.4f}", "", "", "", str(report.total_pixels))
    table.add_row("mIoU", f"{report.miou:.4f}", "", "", "", "")
    table.add_row("mean F1", "", f"{report.mean_f1:.4f}", "", "", "")
    return table


# ==================================================================== 推理
def predict(
    checkpoint: Union[str, Checkpoint],
    image: np.ndarray,
    out_png: Optional[str] = None,
    probs_out: Optional[str] = None,
    tta: bool = False,
) -> np.ndarray:
    """
    对单幅 (3,H,W) 图像预测类别掩码，可选写出调色板 PNG 与概率归档

    Returns:
        (H,W) uint8 类别掩码
    """
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, str) else checkpoint
    model = ckpt.build_model().eval()
    config = ckpt.train_config or TrainConfig()
    probs = predict_image(model, image, config, model.config.num_classes, tta)
    mask = np.argmax(probs, axis=0).astype(np.uint8)
    if out_png:
        write_rgb(out_png, DEFAULT_PALETTE.encode(mask))
        logger.info(f"预测结果已写出: {out_png}")
    if probs_out:
        write_tensor_archive(probs_out, {"probs": probs.astype(np.float32)}, {"classes": CLASS_NAMES[:probs.shape[0]]})
    return mask


# ================================================================ 模型检查
def inspect(model_config: ModelConfig, input_size: int = 512, depth: int = 2) -> ComplexityReport:
    """构建模型并在 (1,3,input_size,input_size) 上统计参数量与 FLOPs（dry-run）"""
    model = build_model(model_config)
    return count_flops(model, (1, model_config.in_channels, input_size, input_size), dry_run=True, depth=depth)


def render_complexity(report: ComplexityReport) -> Table:
    table = Table(title=f"复杂度  输入 {tuple(report.input_shape)}")
    table.add_column("module")
    table.add_column("params", justify="right")
    table.add_column("MACs (G)", justify="right")
    table.add_column("FLOPs (G)", justify="right")
    for m in report.modules:
        table.add_row(m.name, f"{m.params:,}", f"{m.macs / 1e9:.3f}", f"{m.flops / 1e9:.3f}")
    table.add_section()
    table.add_row("total", f"{report.params:,}", f"{report.macs / 1e9:.3f}", f"{report.flops / 1e9:.3f}")
    return table


def context_maps(model: BafnetModel, image: np.ndarray) -> List[Dict[str, np.ndarray]]:
    """
    运行一次前向并收集每个 RLAB 的四种上下文特征图

    每张图为通道均值后做最小-最大归一化的 (H,W) 数组；被消融关闭的分支为全零图。
    """
    if not model.config.has_rl:
        raise ConfigError("该配置没有远程-局部路径，无法导出上下文特征图")
    if image.ndim == 3:
        image = image[None]
    dtype = model.parameters()[0].dtype
    contexts: List[Dict[str, np.ndarray]] = []
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            model.forward_features(Tensor(image[:1].astype(dtype)), contexts)
    finally:
        model.train(was_training)
    return [{name: normalize_map(ctx[name][0].mean(axis=0)) for name in CONTEXT_NAMES} for ctx in contexts]


def inspect_features(checkpoint: Union[str, Checkpoint, BafnetModel], image: np.ndarray, out_dir: str) -> List[str]:
    """把每个 RLAB 的上下文图写成灰度 PNG：{out_dir}/rlab{i}_{context}.png"""
    if isinstance(checkpoint, BafnetModel):
        model = checkpoint
    else:
        ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, str) else checkpoint
        model = ckpt.build_model()
    paths = []
    for i, maps in enumerate(context_maps(model, image)):
        for name, values in maps.items():
            path = os.path.join(out_dir, f"rlab{i}_{name}.png")
            write_gray(path, values)
            paths.append(path)
    logger.info(f"上下文特征图已写出: {out_dir}（{len(paths)} 张）")
    return paths


# ================================================================ 梯度检验
def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def _op_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[..., Tensor], List[Tensor]]]:
    """每个算子用固定的随机权重做加权求和，得到标量目标"""
    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    w_conv, w_dw, w_pw = rng.normal(size=(2, 4, 6, 6)), rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 2, 6, 6))
    w_up, w_bn, w_ln = rng.normal(size=(1, 2, 8, 6)), rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(5, 4))
    w_act, w_sm, w_mm = rng.normal(size=(3, 4)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 5))
    w_attn = rng.normal(size=(3, 4, 8))
    attn = WindowAttention(8, 2, 2, rng)
    attn.relative_bias.data = rng.normal(scale=0.1, size=attn.relative_bias.shape)
    mask = rng.integers(0, 3, size=(2, 4, 4))
    mask[0, 0, 0] = 255
    rm, rv = np.zeros(3), np.ones(3)
    return {
        "conv2d": (lambda x, w, b: _weighted(F.conv2d(x, w, b, 1, 1), w_conv), [t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)]),
        "conv2d_depthwise_dilated": (lambda x, w: _weighted(F.conv2d(x, w, None, 1, 2, 2, 3), w_dw), [t(2, 3, 6, 6), t(3, 1, 3, 3)]),
        "conv2d_strided": (lambda x, w: (F.conv2d(x, w, None, 2, 1) ** 2).sum(), [t(1, 2, 6, 6), t(3, 2, 3, 3)]),
        "conv2d_pointwise": (lambda x, w: _weighted(F.conv2d(x, w), w_pw), [t(2, 3, 6, 6), t(2, 3, 1, 1)]),
        "bilinear_resize": (lambda x: _weighted(F.bilinear_resize(x, factor=2), w_up), [t(1, 2, 4, 3)]),
        "batch_norm": (lambda x, g, b: _weighted(F.batch_norm(x, g, b, rm.copy(), rv.copy(), True), w_bn), [t(2, 3, 6, 6), t(3), t(3)]),
        "layer_norm": (lambda x, g, b: _weighted(F.layer_norm(x, g, b), w_ln), [t(5, 4), t(4), t(4)]),
        "gelu": (lambda x: _weighted(F.gelu(x), w_act), [t(3, 4)]),
        "sigmoid": (lambda x: _weighted(F.sigmoid(x), w_act), [t(3, 4)]),
        "softmax": (lambda x: _weighted(F.softmax(x, axis=1), w_sm), [t(2, 3, 4)]),
        "matmul": (lambda a, b: _weighted(a @ b, w_mm), [t(2, 3, 4), t(2, 4, 5)]),
        "window_attention": (lambda x: _weighted(attn(x), w_attn), [t(3, 4, 8)]),
        "hybrid_loss": (lambda z: segmentation_loss(z, mask, 3).total, [t(2, 3, 4, 4)]),
    }


def gradcheck_suite(
    seed: int = 0,
    end_to_end: bool = True,
    model_config: Optional[ModelConfig] = None,
    size: int = 64,
    sample: int = 10,
) -> Dict[str, GradcheckResult]:
    """
    双精度下逐算子梯度检验，可选加上整网检验（相对容差 1e-2）

    整网检验在评估模式下进行：从参数表中随机抽取 sample 个参数张量，每个张量检验一个随机元素，
    另外检验一个输入像素。
    """
    results: Dict[str, GradcheckResult] = {}
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        for name, (fn, inputs) in _op_cases(rng).items():
            results[name] = gradcheck(fn, inputs, rtol=1e-3, sample=64, rng=rng)
        if end_to_end:
            config = model_config or ModelConfig()
            model = BafnetModel(config).eval()
            image = Tensor(rng.uniform(size=(1, config.in_channels, size, size)), requires_grad=True)
            target = rng.normal(size=(1, config.num_classes, size, size))
            registry = model.param_registry()
            names = list(registry)
            picked = [names[i] for i in np.sort(rng.choice(len(names), size=min(sample, len(names)), replace=False))]
            checked_tensors = [image] + [registry[n] for n in picked]

            def forward(*_):
                return (model(image) * Tensor(target)).sum()

            results["end_to_end"] = gradcheck(
                forward, checked_tensors, eps=1e-5, rtol=1e-2, atol=1e-8, rng=rng, per_input=1, labels=["image"] + picked,
            )
    for name, r in results.items():
        logger.info(f"梯度检验 {name}: 最大相对误差 {r.max_rel_error:.2e}, 检验 {r.checked} 个元素, {'通过' if r.passed else '失败'}")
    return results


def render_gradcheck(results: Dict[str, GradcheckResult]) -> Table:
    table = Table(title="梯度检验（float64）")
    table.add_column("op")
    table.add_column("max rel err", justify="right")
    table.add_column("checked", justify="right")
    table.add_column("result")
    for name, r in results.items():
        table.add_row(name, f"{r.max_rel_error:.2e}", str(r.checked), "[green]pass[/]" if r.passed else "[red]FAIL[/]")
    return table
