"""
Miniature F-ResNet: a basic-block residual backbone whose outputs pass through
Fourier Units, producing the spectral-context features G_2..G_5.
"""

from dataclasses import dataclass
from typing import Iterator

from ffpf.exceptions import DimensionError
from ffpf.layers import ConvBNReLU, Module, ModuleList
from ffpf.models import ModelConfig, StageSpec
from ffpf.spectral import FourierUnit
from ffpf.tensor import Tensor, add, relu

LEVELS = (2, 3, 4, 5)


@dataclass
class PyramidFeatures:
    """Per-level maps for levels 2..5 at strides 4, 8, 16, 32."""

    levels: list[Tensor]

    def __post_init__(self) -> None:
        if len(self.levels) != len(LEVELS):
            raise DimensionError(f"expected {len(LEVELS)} pyramid levels, got {len(self.levels)}")
        for finer, coarser in zip(self.levels, self.levels[1:]):
            fh, fw = finer.shape[2:]
            ch, cw = coarser.shape[2:]
            if (fh, fw) != (2 * ch, 2 * cw):
                raise DimensionError(
                    f"pyramid levels must halve H and W: {finer.shape} -> {coarser.shape}"
                )

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[LEVELS.index(level)]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def strides(self) -> list[int]:
        return [2**i for i in LEVELS]


class ResidualBlock(Module):
    """Two 3x3 conv-BN layers plus an identity or 1x1-projected shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = ConvBNReLU(in_channels, out_channels, 3, stride)
        self.conv2 = ConvBNReLU(out_channels, out_channels, 3, 1, activate=False)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ConvBNReLU(in_channels, out_channels, 1, stride, activate=False)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        return residual_block(x, self)


def residual_block(x: Tensor, params: ResidualBlock) -> Tensor:
    residual = params.conv2(params.conv1(x))
    identity = params.shortcut(x) if params.shortcut is not None else x
    if residual.shape != identity.shape:
        raise DimensionError(
            f"residual_block: shortcut shape {identity.shape} != branch shape {residual.shape}"
        )
    return relu(add(residual, identity))


class Stage(Module):
    def __init__(self, in_channels: int, spec: StageSpec, placement: str, fu_init: str) -> None:
        super().__init__()
        self.blocks = ModuleList()
        self.block_fus = ModuleList()
        self.fu = None
        for b in range(spec.blocks):
            stride = spec.stride if b == 0 else 1
            c_in = in_channels if b == 0 else spec.channels
            self.blocks.append(ResidualBlock(c_in, spec.channels, stride))
            if spec.fu_enabled and placement == "block":
                self.block_fus.append(FourierUnit(spec.channels, init=fu_init))
        if spec.fu_enabled and placement == "stage":
            self.fu = FourierUnit(spec.channels, init=fu_init)

    def forward(self, x: Tensor) -> Tensor:
        for b, block in enumerate(self.blocks):
            x = block(x)
            if len(self.block_fus):
                x = self.block_fus[b](x)
        if self.fu is not None:
            x = self.fu(x)
        return x


class FResNet(Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        # 3x3 stride-2 conv, then a stride-2 conv in place of max pooling: stride 4
        self.stem1 = ConvBNReLU(config.in_channels, config.stem_channels, 3, 2)
        self.stem2 = ConvBNReLU(config.stem_channels, config.stem_channels, 3, 2)
        self.stages = ModuleList()
        c_in = config.stem_channels
        for spec in config.stages:
            self.stages.append(Stage(c_in, spec, config.fu_placement, config.fu_init))
            c_in = spec.channels

    @property
    def out_channels(self) -> list[int]:
        return [s.channels for s in self.config.stages]

    def forward(self, image: Tensor) -> PyramidFeatures:
        return f_resnet_forward(image, self.config, self)


def check_input_size(image: Tensor, config: ModelConfig) -> None:
    if image.data.ndim != 4:
        raise DimensionError(f"expected [N,3,H,W] image batch, got {image.shape}")
    _, c, h, w = image.shape
    if c != config.in_channels:
        raise DimensionError(f"image axis C is {c}, model expects {config.in_channels}")
    d = config.size_divisor
    if h % d or w % d or h == 0 or w == 0:
        raise DimensionError(f"image axis H/W ({h}x{w}) must be positive multiples of {d}")


def f_resnet_forward(image: Tensor, config: ModelConfig, params: FResNet) -> PyramidFeatures:
    """F_Ri = stage_i(previous); G_i = FU(F_Ri) where enabled, else F_Ri."""
    check_input_size(image, config)
    x = params.stem2(params.stem1(image))
    levels: list[Tensor] = []
    for stage in params.stages:
        x = stage(x)
        levels.append(x)
    return PyramidFeatures(levels)
