"""
Bilateral Spectral-aware FPN and the plain FPN it is compared against.

BS-FPN, per level i (common width C after lateral 1x1 projections):
    U_5 = Conv(G_5),  U_i = Conv(G_i + Carafe(U_{i+1}))         top-down
    B_2 = U_2,        B_{i+1} = Conv(U_{i+1} + Down(B_i))         bottom-up
    S_i = sigmoid(T2(GAP(T1(G_i))))                               channel attention
    L_i = B_i + S_i * G_i                                         skip fusion
"""

import numpy as np

from ffpf.backbone import PyramidFeatures
from ffpf.exceptions import DimensionError
from ffpf.layers import Conv2d, ConvBNReLU, Module, ModuleList
from ffpf.models import CarafeSpec, ModelConfig
from ffpf.tensor import (
    Tensor,
    add,
    carafe_reassemble,
    global_avg_pool,
    mul,
    pixel_shuffle,
    sigmoid,
    softmax_channels,
    upsample_nearest2x,
)

SCALE = 2


class Carafe(Module):
    """Content-aware 2x upsampling: predict a softmax-normalized k_up x k_up
    kernel per output location, then reassemble the input neighbourhood with it.
    """

    def __init__(self, channels: int, spec: CarafeSpec) -> None:
        super().__init__()
        self.channels = channels
        self.k_up = spec.k_up
        self.force_uniform = spec.force_uniform
        self.compressor = Conv2d(channels, spec.c_mid, 1, bias=True)
        self.encoder = Conv2d(
            spec.c_mid,
            spec.k_up * spec.k_up * SCALE * SCALE,
            spec.k_enc,
            bias=True,
            init="normal:0.001",
        )

    def kernels(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        kk = self.k_up * self.k_up
        if self.force_uniform:
            return Tensor(
                np.full((n, kk, h * SCALE, w * SCALE), 1.0 / kk), dtype=x.data.dtype.type
            )
        encoded = self.encoder(self.compressor(x))
        return softmax_channels(pixel_shuffle(encoded, SCALE))

    def forward(self, x: Tensor) -> Tensor:
        return carafe_upsample(x, self)


def carafe_upsample(x: Tensor, params: Carafe) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != params.channels:
        raise DimensionError(
            f"carafe_upsample: expected {params.channels} channels on axis C, got {x.shape}"
        )
    return carafe_reassemble(x, params.kernels(x), params.k_up, SCALE)


class ChannelAttention(Module):
    """T1: 3x3 conv-BN-ReLU keeping the width; T2: 1x1 conv on the pooled vector."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.t1 = ConvBNReLU(channels, channels, 3)
        self.t2 = Conv2d(channels, channels, 1, bias=True)

    def forward(self, g: Tensor) -> Tensor:
        return cam(g, self)


def cam(g: Tensor, params: ChannelAttention) -> Tensor:
    """S_i in (0, 1), shape [N, C, 1, 1]."""
    z = global_avg_pool(params.t1(g))
    return sigmoid(params.t2(z))


def _require_spatial_match(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"{op}: axis H/W mismatch after resampling ({a.shape} vs {b.shape})"
        )


def top_down_step(g_i: Tensor, u_next: Tensor, conv: Conv2d, upsampler: Carafe) -> Tensor:
    """U_i = Conv(G_i + Upsample(U_{i+1}))."""
    up = upsampler(u_next)
    _require_spatial_match(g_i, up, "top_down_step")
    return conv(add(g_i, up))


def bottom_up_step(u_next: Tensor, b_i: Tensor, conv: Conv2d, downsample: Conv2d) -> Tensor:
    """B_{i+1} = Conv(U_{i+1} + Downsample(B_i))."""
    down = downsample(b_i)
    _require_spatial_match(u_next, down, "bottom_up_step")
    return conv(add(u_next, down))


class BSFPN(Module):
    def __init__(self, config: ModelConfig, in_channels: list[int]) -> None:
        super().__init__()
        c = config.neck_channels
        self.skip_source = config.skip_source
        self.laterals = ModuleList([Conv2d(ci, c, 1, bias=True) for ci in in_channels])
        self.td_convs = ModuleList([Conv2d(c, c, 1, bias=True) for _ in in_channels])
        self.upsamplers = ModuleList([Carafe(c, config.carafe) for _ in in_channels[:-1]])
        self.downsamplers = ModuleList(
            [Conv2d(c, c, 3, stride=2, bias=False) for _ in in_channels[:-1]]
        )
        self.bu_convs = ModuleList([Conv2d(c, c, 1, bias=True) for _ in in_channels[:-1]])
        self.cams = ModuleList([ChannelAttention(c) for _ in in_channels])

    def forward(self, features: PyramidFeatures) -> PyramidFeatures:
        return bs_fpn_forward(features, self)


def bs_fpn_forward(features: PyramidFeatures, params: BSFPN) -> PyramidFeatures:
    levels = len(features)
    lateral = [params.laterals[i](g) for i, g in enumerate(features)]

    top_down: list[Tensor] = [lateral[0]] * levels
    top_down[-1] = params.td_convs[-1](lateral[-1])
    for i in range(levels - 2, -1, -1):
        top_down[i] = top_down_step(
            lateral[i], top_down[i + 1], params.td_convs[i], params.upsamplers[i]
        )

    bottom_up: list[Tensor] = [top_down[0]]
    for i in range(levels - 1):
        bottom_up.append(
            bottom_up_step(
                top_down[i + 1], bottom_up[i], params.bu_convs[i], params.downsamplers[i]
            )
        )

    skip = lateral if params.skip_source == "lateral" else list(features)
    outputs = []
    for i in range(levels):
        gate = params.cams[i](skip[i])
        outputs.append(add(bottom_up[i], mul(gate, skip[i])))
    return PyramidFeatures(outputs)


class PlainFPN(Module):
    """Lateral 1x1, nearest 2x top-down sums, 3x3 output convs."""

    def __init__(self, config: ModelConfig, in_channels: list[int]) -> None:
        super().__init__()
        c = config.neck_channels
        self.laterals = ModuleList([Conv2d(ci, c, 1, bias=True) for ci in in_channels])
        self.outputs = ModuleList([Conv2d(c, c, 3, bias=True) for _ in in_channels])

    def forward(self, features: PyramidFeatures) -> PyramidFeatures:
        lateral = [self.laterals[i](g) for i, g in enumerate(features)]
        merged = lateral[-1]
        tops = [merged]
        for i in range(len(lateral) - 2, -1, -1):
            merged = add(lateral[i], upsample_nearest2x(merged))
            tops.insert(0, merged)
        return PyramidFeatures([self.outputs[i](p) for i, p in enumerate(tops)])


def build_neck(config: ModelConfig, in_channels: list[int]) -> Module:
    if config.bs_fpn_enabled:
        return BSFPN(config, in_channels)
    return PlainFPN(config, in_channels)
