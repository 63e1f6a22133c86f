"""
命令行入口：python -m bafnet <subcommand>

子命令：train、eval、predict、inspect、inspect-features、gradcheck、synth。
ModelConfig 与 TrainConfig 的每个字段都会生成一个同名参数（下划线换成连字符），
其值覆盖 --config 指定的 YAML 文件。

退出码：0 成功，1 用法或配置错误，2 数值错误（NaN/Inf），3 I/O、数据或检查点错误。
"""

import argparse
import json
import logging
import os
import sys
import typing
from typing import Any, Optional, Sequence

from dotenv import load_dotenv
from rich.console import Console

from bafnet.core.config import get_settings, load_config
from bafnet.core.data import split_train_val, synth_generate
from bafnet.core.dataset import load_split, write_split
from bafnet.core.errors import BafnetError, CheckpointError, ConfigError, DataError, NumericError, ShapeError
from bafnet.core.trainer import (
    evaluate,
    gradcheck_suite,
    inspect,
    inspect_features,
    predict,
    render_complexity,
    render_gradcheck,
    render_metrics,
    train,
)
from bafnet.schemas.schemas import ABLATION_PRESETS, ModelConfig, TrainConfig
from bafnet.utils.image_utils import read_rgb, to_chw_float

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise ConfigError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_field(group, name: str, annotation: Any) -> None:
    origin = typing.get_origin(annotation)
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    if origin is typing.Union and len(args) == 1:
        annotation = args[0]
        origin, args = typing.get_origin(annotation), list(typing.get_args(annotation))
    if annotation is bool:
        group.add_argument(_flag(name), dest=name, action=argparse.BooleanOptionalAction, default=None)
    elif origin is typing.Literal:
        group.add_argument(_flag(name), dest=name, choices=list(args), default=None)
    elif origin in (list, tuple):
        element = next((a for a in args if a is not Ellipsis), str)
        group.add_argument(_flag(name), dest=name, nargs="+", type=element, default=None)
    else:
        group.add_argument(_flag(name), dest=name, type=annotation, default=None)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML 键值配置文件")
    parser.add_argument("--preset", choices=ABLATION_PRESETS, help="消融配置")
    model_group = parser.add_argument_group("model")
    for name, info in ModelConfig.model_fields.items():
        _add_field(model_group, name, info.annotation)
    train_group = parser.add_argument_group("train")
    for name, info in TrainConfig.model_fields.items():
        _add_field(train_group, name, info.annotation)


def config_from_args(args: argparse.Namespace):
    names = list(ModelConfig.model_fields) + list(TrainConfig.model_fields)
    overrides = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    return load_config(args.config, overrides, args.preset)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bafnet", description="双路径遥感语义分割网络：训练、评估与模型检查")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="训练模型")
    add_config_flags(p)
    p.add_argument("--data-root", help="数据集根目录（含 train/ 与可选的 val/）")
    p.add_argument("--synth-count", type=int, help="不读磁盘，直接生成这么多幅合成场景")
    p.add_argument("--synth-size", type=int, default=256)
    p.add_argument("--out", required=True, help="检查点输出路径")
    p.add_argument("--resume", help="从该检查点继续训练")
    p.add_argument("--history", help="把训练历史写成 JSON")
    p.add_argument("--progress", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("eval", help="评估检查点")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", help="数据集根目录，缺省取 DATA_ROOT")
    p.add_argument("--split", default="test")
    p.add_argument("--tta", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report-json")
    p.add_argument("--report-tsv")

    p = sub.add_parser("predict", help="对单幅图像预测")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="调色板 PNG 输出路径")
    p.add_argument("--probs", help="可选的概率归档输出路径")
    p.add_argument("--tta", action="store_true")

    p = sub.add_parser("inspect", help="参数量与 FLOPs 统计")
    add_config_flags(p)
    p.add_argument("--input-size", type=int, default=512)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--json", dest="json_out")

    p = sub.add_parser("inspect-features", help="导出每个 RLAB 的上下文特征图")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("gradcheck", help="双精度有限差分梯度检验")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=ABLATION_PRESETS, default="full")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--sample", type=int, default=10)
    p.add_argument("--end-to-end", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("synth", help="生成合成数据集")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    return parser


# ================================================================== 子命令
def _train_data(args: argparse.Namespace, train_config: TrainConfig):
    if args.synth_count:
        samples = synth_generate(train_config.seed, args.synth_count, args.synth_size)
        return split_train_val(samples, train_config.val_fraction, train_config.seed)
    if not args.data_root:
        raise ConfigError("需要 --data-root 或 --synth-count")
    samples = load_split(args.data_root, "train")
    if os.path.isdir(os.path.join(args.data_root, "val")):
        return samples, load_split(args.data_root, "val")
    return split_train_val(samples, train_config.val_fraction, train_config.seed)


def cmd_train(args: argparse.Namespace) -> int:
    model_config, train_config = config_from_args(args)
    if train_config.seed is None:
        raise ConfigError("train 必须给定 --seed")
    train_samples, val_samples = _train_data(args, train_config)
    result = train(
        model_config, train_config, train_samples, val_samples,
        out=args.out, resume=args.resume, show_progress=args.progress,
    )
    if args.history:
        with open(args.history, "w", encoding="utf-8") as f:
            f.write(result.history.model_dump_json(indent=2))
    last = result.history.records[-1] if result.history.records else None
    if last is not None:
        console.print(f"训练完成: 最终损失 {last.loss.total:.4f}" + (f", 验证 mIoU {last.val_miou:.4f}" if last.val_miou is not None else ""))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    samples = load_split(args.data_root or get_settings().data_root, args.split)
    report = evaluate(args.checkpoint, samples, tta=args.tta, workers=args.workers)
    console.print(render_metrics(report))
    if args.report_json:
        with open(args.report_json, "w", encoding="utf-8") as f:
            json.dump(report.to_key_values(), f, indent=2)
    if args.report_tsv:
        with open(args.report_tsv, "w", encoding="utf-8") as f:
            f.write(report.to_table())
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    image = to_chw_float(read_rgb(args.image))
    predict(args.checkpoint, image, out_png=args.out, probs_out=args.probs, tta=args.tta)
    console.print(f"预测结果已写出: {args.out}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    model_config, _ = config_from_args(args)
    report = inspect(model_config, args.input_size, args.depth)
    console.print(render_complexity(report))
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as f:
            f.write(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_inspect_features(args: argparse.Namespace) -> int:
    image = to_chw_float(read_rgb(args.image))
    paths = inspect_features(args.checkpoint, image, args.out_dir)
    console.print(f"已写出 {len(paths)} 张上下文特征图到 {args.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = gradcheck_suite(
        seed=args.seed, end_to_end=args.end_to_end,
        model_config=ModelConfig.preset(args.preset), size=args.size, sample=args.sample,
    )
    console.print(render_gradcheck(results))
    if not all(r.passed for r in results.values()):
        raise NumericError("梯度检验未通过", {k: f"{r.max_rel_error:.2e}" for k, r in results.items() if not r.passed})
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    samples = synth_generate(args.seed, args.count, args.size)
    train_samples, val_samples = split_train_val(samples, args.val_fraction, args.seed)
    write_split(args.out, "train", train_samples)
    if val_samples:
        write_split(args.out, "val", val_samples)
    console.print(f"合成数据已写出: {args.out}（训练 {len(train_samples)}，验证 {len(val_samples)}）")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "inspect": cmd_inspect,
    "inspect-features": cmd_inspect_features,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    log_level = os.getenv("LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except NumericError as e:
        logger.error(f"数值错误: {e}")
        return EXIT_NUMERIC
    except (ConfigError, ShapeError) as e:
        logger.error(f"用法或配置错误: {e}")
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as e:
        logger.error(f"I/O 或数据错误: {e}")
        return EXIT_IO
    except BafnetError as e:
        logger.error(f"运行失败: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
