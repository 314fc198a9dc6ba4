"""
Configuration and record models used throughout the 'ffpf' library.
"""

import math
from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator

ShapeName = Literal["square", "disk", "bar"]
SHAPE_CLASSES: tuple[ShapeName, ...] = ("square", "disk", "bar")


class StageSpec(BaseModel):
    blocks: int = Field(default=1, ge=1)
    channels: int = Field(gt=0)
    stride: Literal[1, 2] = 2
    fu_enabled: bool = True


class CarafeSpec(BaseModel):
    k_up: int = 5
    k_enc: int = 3
    c_mid: int = Field(default=16, gt=0)
    # Skip the kernel predictor and reassemble with 1/k_up^2 everywhere.
    force_uniform: bool = False

    @field_validator("k_up", "k_enc")
    @classmethod
    def _odd(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd integer, got {value}")
        return value


class AnchorSpec(BaseModel):
    # Per-level base size is octave_base_scale * stride.
    octave_base_scale: float = 4.0
    scales_per_octave: int = Field(default=3, ge=1)
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    @property
    def num_anchors(self) -> int:
        return self.scales_per_octave

    def scales(self) -> list[float]:
        return [
            self.octave_base_scale * 2 ** (i / self.scales_per_octave)
            for i in range(self.scales_per_octave)
        ]


def _default_stages() -> list[StageSpec]:
    return [
        StageSpec(blocks=1, channels=16, stride=1),
        StageSpec(blocks=1, channels=32, stride=2),
        StageSpec(blocks=1, channels=64, stride=2),
        StageSpec(blocks=1, channels=128, stride=2),
    ]


class ModelConfig(BaseModel):
    in_channels: int = 3
    stem_channels: int = 16
    stages: list[StageSpec] = Field(default_factory=_default_stages)
    fu_placement: Literal["stage", "block"] = "stage"
    fu_init: Literal["zeros", "kaiming"] = "zeros"
    bs_fpn_enabled: bool = True
    neck_channels: int = 64
    carafe: CarafeSpec = Field(default_factory=CarafeSpec)
    skip_source: Literal["lateral", "raw"] = "lateral"
    num_classes: int = Field(default=len(SHAPE_CLASSES), ge=1)
    head_convs: int = Field(default=1, ge=0)
    anchor: AnchorSpec = Field(default_factory=AnchorSpec)
    seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if len(self.stages) != 4:
            raise ValueError("exactly four stages are required (levels 2..5)")
        strides = [s.stride for s in self.stages]
        if strides != [1, 2, 2, 2]:
            raise ValueError(f"stage strides must be [1, 2, 2, 2], got {strides}")
        if self.skip_source == "raw":
            widths = {s.channels for s in self.stages}
            if widths != {self.neck_channels}:
                raise ValueError(
                    "skip_source='raw' needs every stage width to equal "
                    f"neck_channels={self.neck_channels}, got {sorted(widths)}"
                )
        return self

    @property
    def strides(self) -> list[int]:
        return [4, 8, 16, 32]

    @property
    def size_divisor(self) -> int:
        return 32

    @property
    def fu_enabled(self) -> bool:
        return any(s.fu_enabled for s in self.stages)

    def variant(self, *, fu: bool, bs_fpn: bool) -> "ModelConfig":
        """The same architecture with the Fourier Units and/or BS-FPN toggled."""
        stages = [s.model_copy(update={"fu_enabled": fu}) for s in self.stages]
        return self.model_copy(update={"stages": stages, "bs_fpn_enabled": bs_fpn})

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Smallest useful architecture, for gradient checks and fast tests."""
        values: dict = {
            "stem_channels": 4,
            "stages": [
                StageSpec(blocks=1, channels=4, stride=1),
                StageSpec(blocks=1, channels=4, stride=2),
                StageSpec(blocks=1, channels=8, stride=2),
                StageSpec(blocks=1, channels=8, stride=2),
            ],
            "neck_channels": 8,
            "carafe": CarafeSpec(k_up=3, k_enc=3, c_mid=4),
            "head_convs": 1,
        }
        values.update(overrides)
        return cls(**values)


class TrainConfig(BaseModel):
    epochs: int = Field(default=12, ge=0)
    lr: float = Field(default=0.01, gt=0)
    lr_decay: float = 0.1
    # None means the 8/12 and 11/12 points of the run (exactly 8 and 11 at 12).
    decay_epochs: list[int] | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = Field(default=8, ge=1)
    warmup_iters: int = Field(default=50, ge=0)
    warmup_ratio: float = 0.001
    seed: int = 0
    evaluate_each_epoch: bool = True

    @model_validator(mode="after")
    def _check_decays(self) -> "TrainConfig":
        if self.decay_epochs is not None:
            bad = [e for e in self.decay_epochs if not 0 < e < self.epochs]
            if bad:
                raise ValueError(
                    f"decay epochs must lie in (0, {self.epochs}), got {bad}"
                )
        return self

    def resolved_decay_epochs(self) -> list[int]:
        if self.decay_epochs is not None:
            return sorted(self.decay_epochs)
        if self.epochs == 12:
            return [8, 11]
        candidates = [
            math.ceil(2 * self.epochs / 3),
            math.ceil(11 * self.epochs / 12),
        ]
        return sorted({e for e in candidates if 0 < e < self.epochs})

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-indexed epoch, before warmup."""
        decays = sum(1 for d in self.resolved_decay_epochs() if epoch > d)
        return self.lr * self.lr_decay**decays

    def lr_at_step(self, epoch: int, global_step: int) -> float:
        lr = self.lr_at(epoch)
        if global_step < self.warmup_iters:
            k = (1 - global_step / self.warmup_iters) * (1 - self.warmup_ratio)
            lr = lr * (1 - k)
        return lr


class SceneSpec(BaseModel):
    image_size: int = Field(default=64, ge=16)
    min_objects: int = Field(default=1, ge=1)
    max_objects: int = 6
    min_size: int = Field(default=4, ge=4)
    max_size: int = 10
    shapes: list[ShapeName] = Field(default_factory=lambda: list(SHAPE_CLASSES))
    noise_cells: int = Field(default=8, ge=1)
    brightness_jitter: float = Field(default=0.15, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SceneSpec":
        if self.max_objects < self.min_objects:
            raise ValueError("max_objects must be >= min_objects")
        if self.max_size < self.min_size:
            raise ValueError("max_size must be >= min_size")
        if self.max_size >= self.image_size:
            raise ValueError("max_size must be smaller than image_size")
        if not self.shapes:
            raise ValueError("at least one shape is required")
        return self


class BoxDetection(BaseModel):
    class_id: int = Field(ge=0)
    score: float = Field(ge=0.0, le=1.0)
    box: tuple[float, float, float, float]
    image_id: str = ""

    @field_validator("box")
    @classmethod
    def _ordered(
        cls, box: tuple[float, float, float, float]
    ) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"box must satisfy x1<x2 and y1<y2, got {box}")
        return box


class EvaluationResult(BaseModel):
    per_class_ap: dict[int, float]
    map: float
    num_detections: int


class EpochMetrics(BaseModel):
    epoch: int
    lr: float
    mean_loss: float
    steps: int
    ap50: float | None = None


class AblationRow(BaseModel):
    name: str
    fu: bool
    bs_fpn: bool
    ap50: float
    per_class_ap: dict[int, float]


class GradCheckEntry(BaseModel):
    name: str
    max_rel_error: float
    threshold: float
    passed: bool
    location: str | None = None


class GradCheckReport(BaseModel):
    entries: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)


class BenchRow(BaseModel):
    size: int
    rfft2_ms: float
    irfft2_ms: float
    roundtrip_max_abs: float
    dft_max_abs: float
