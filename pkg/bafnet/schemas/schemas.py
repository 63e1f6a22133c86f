import hashlib
import json
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

CLASS_NAMES = ["impervious_surface", "building", "low_vegetation", "tree", "car", "clutter"]


class ModelConfig(BaseModel):
    """网络结构超参数；默认值即完整的 BAFNet"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_classes: int = 6
    in_channels: int = 3
    backbone: Literal["van_b0", "resnet18_stub"] = "van_b0"
    # 依赖路径（VAN-B0）
    dep_channels: Tuple[int, int, int, int] = (32, 64, 160, 256)
    dep_depths: Tuple[int, int, int, int] = (3, 3, 5, 2)
    dep_mlp_ratios: Tuple[int, int, int, int] = (2, 2, 4, 8)
    lka_kernel: int = 5
    lka_dilated_kernel: int = 7
    lka_dilation: int = 3
    resnet_channels: Tuple[int, int, int, int] = (64, 128, 256, 512)
    # 远程-局部路径；默认宽度下整网在 512×512 上约 6.66M 参数、13.2G FLOPs
    use_rl_local: bool = True
    use_rl_remote: bool = True
    rl_channels: int = 64
    rl_depths: Tuple[int, int, int] = (2, 1, 1)
    window_size: int = 8
    num_heads: int = 4
    rl_mlp_ratio: int = 4
    mslam_expansion: int = 2
    mslam_kernels: Tuple[int, ...] = (3, 5, 7)
    eram_conv_kernel: int = 7
    # 融合与分割头
    fusion: Literal["sum", "fam"] = "fam"
    fam_gate_kernel: int = 5
    init_seed: int = 0

    @field_validator("num_classes", "in_channels", "rl_channels", "window_size", "num_heads", "rl_mlp_ratio", "mslam_expansion")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("必须为正整数")
        return v

    @field_validator("mslam_kernels")
    @classmethod
    def _odd_kernels(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(k <= 0 or k % 2 == 0 for k in v):
            raise ValueError("MSLAM 分支卷积核必须是正奇数")
        return v

    @model_validator(mode="after")
    def _check_consistency(self) -> "ModelConfig":
        if self.rl_channels % self.num_heads:
            raise ValueError(f"注意力头数 {self.num_heads} 不能整除通道数 {self.rl_channels}")
        if self.backbone == "resnet18_stub" and self.has_rl:
            raise ValueError("ResNet18 基线只用于纯依赖路径的消融配置")
        if not self.has_rl and self.fusion == "fam":
            raise ValueError("没有远程-局部路径时不能使用 FAM 融合")
        return self

    @property
    def has_rl(self) -> bool:
        return self.use_rl_local or self.use_rl_remote

    @property
    def stage_channels(self) -> Tuple[int, int, int, int]:
        return self.dep_channels if self.backbone == "van_b0" else self.resnet_channels

    @property
    def input_multiple(self) -> int:
        """输入边长必须是该值的整数倍：依赖路径下采样 32 倍，窗口在 1/8 分辨率上划分"""
        if not self.has_rl:
            return 32
        window_multiple = 8 * self.window_size
        a, b = 32, window_multiple
        while b:
            a, b = b, a % b
        return 32 * window_multiple // a

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        """消融实验的六种配置"""
        presets: Dict[str, Dict[str, Any]] = {
            "cp_resnet18": dict(backbone="resnet18_stub", use_rl_local=False, use_rl_remote=False, fusion="sum"),
            "cp": dict(use_rl_local=False, use_rl_remote=False, fusion="sum"),
            "cp_la": dict(use_rl_local=True, use_rl_remote=False, fusion="sum"),
            "cp_ra": dict(use_rl_local=False, use_rl_remote=True, fusion="sum"),
            "cp_ra_la_sum": dict(use_rl_local=True, use_rl_remote=True, fusion="sum"),
            "full": dict(),
        }
        if name not in presets:
            raise ValueError(f"未知消融配置 {name}，可选: {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


ABLATION_PRESETS = ["cp_resnet18", "cp", "cp_la", "cp_ra", "cp_ra_la_sum", "full"]


class TrainConfig(BaseModel):
    """训练、评估与数据增强参数"""

    model_config = ConfigDict(extra="forbid")

    lr0: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 16
    crop_size: int = 512
    seed: Optional[int] = None
    schedule: Literal["cosine"] = "cosine"
    val_fraction: float = 0.1
    loss_mode: Literal["literal", "categorical"] = "literal"
    loss_include_clutter: bool = True
    clutter_index: int = 5
    eval_classes: Optional[List[int]] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    ignore_index: int = 255
    aug_scales: List[float] = Field(default_factory=lambda: [0.5, 0.75, 1.0, 1.25, 1.5])
    aug_scale_prob: float = 1.0
    aug_hflip_prob: float = 0.5
    aug_vflip_prob: float = 0.5
    aug_rotate_prob: float = 0.5
    tta_scales: List[float] = Field(default_factory=lambda: [0.5, 0.75, 1.0, 1.25, 1.5])
    tta_flips: bool = True
    precision: Literal["float32", "float64"] = "float32"
    prefetch: int = 2
    eval_workers: int = 1
    log_every: int = 10

    @field_validator("lr0", "epochs", "batch_size", "crop_size")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("必须为正数")
        return v

    @field_validator("weight_decay")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("权重衰减不能为负")
        return v

    @field_validator("val_fraction", "aug_scale_prob", "aug_hflip_prob", "aug_vflip_prob", "aug_rotate_prob")
    @classmethod
    def _unit_interval(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("必须位于 [0, 1]")
        return v

    @field_validator("aug_scales", "tta_scales")
    @classmethod
    def _positive_scales(cls, v: List[float]) -> List[float]:
        if not v or any(s <= 0 for s in v):
            raise ValueError("缩放倍率列表不能为空且必须为正")
        return v

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        """桌面规模：批大小 4、裁剪 256，学习率不变"""
        return cls(**{"batch_size": 4, "crop_size": 256, **overrides})


class LossReport(BaseModel):
    ce: float
    dice: float
    total: float

    @model_validator(mode="after")
    def _check_total(self) -> "LossReport":
        if abs(self.total - (self.ce + self.dice)) > 1e-9 * max(1.0, abs(self.total)):
            raise ValueError("total 必须等于 ce + dice")
        return self


class ClassMetrics(BaseModel):
    index: int
    name: str
    iou: float
    f1: float
    precision: float
    recall: float
    support: int
    flagged: bool = False


class MetricsReport(BaseModel):
    """评估报告：逐类 IoU/F1 与 OA、mIoU、mean F1"""

    oa: float
    miou: float
    mean_f1: float
    per_class: List[ClassMetrics]
    eval_classes: List[int]
    total_pixels: int
    tta: bool = False
    oa_literal: Optional[float] = None
    macro_f1: Optional[float] = None
    params: Optional[int] = None
    flops: Optional[int] = None

    def to_table(self, delimiter: str = "\t") -> str:
        header = ["class", "iou", "f1", "precision", "recall", "support", "flagged"]
        lines = [delimiter.join(header)]
        for m in self.per_class:
            lines.append(delimiter.join([
                m.name, f"{m.iou:.6f}", f"{m.f1:.6f}", f"{m.precision:.6f}",
                f"{m.recall:.6f}", str(m.support), str(int(m.flagged)),
            ]))
        lines.append(delimiter.join(["OA", f"{self.oa:.6f}"]))
        lines.append(delimiter.join(["mIoU", f"{self.miou:.6f}"]))
        lines.append(delimiter.join(["meanF1", f"{self.mean_f1:.6f}"]))
        return "\n".join(lines) + "\n"

    def to_key_values(self) -> Dict[str, Any]:
        values: Dict[str, Any] = {"OA": self.oa, "mIoU": self.miou, "meanF1": self.mean_f1}
        for m in self.per_class:
            values[f"IoU.{m.name}"] = m.iou
            values[f"F1.{m.name}"] = m.f1
        if self.params is not None:
            values["params"] = self.params
        if self.flops is not None:
            values["FLOPs"] = self.flops
        return values


class ModuleCost(BaseModel):
    name: str
    params: int
    flops: int
    macs: int


class ComplexityReport(BaseModel):
    input_shape: Tuple[int, int, int, int]
    params: int
    flops: int
    macs: int
    modules: List[ModuleCost] = Field(default_factory=list)


class EpochRecord(BaseModel):
    epoch: int
    lr: float
    loss: LossReport
    grad_norm: float
    val_miou: Optional[float] = None


class TrainHistory(BaseModel):
    records: List[EpochRecord] = Field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss.total for r in self.records]


class InspectRequest(BaseModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    input_size: int = 512

    @field_validator("input_size")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("input_size 必须为正")
        return v


class HealthStatus(BaseModel):
    """健康状态模型"""
    status: str
    checkpoint_configured: bool = False
    num_classes: int = len(CLASS_NAMES)
