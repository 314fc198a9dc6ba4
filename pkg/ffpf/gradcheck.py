"""
Finite-difference verification of every differentiable op and of the model's
parts, run in float64.  Each check projects the op output onto fixed random
weights and compares the resulting scalar's gradient with central differences.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ffpf.backbone import FResNet, PyramidFeatures, ResidualBlock
from ffpf.detect import DetectionHead, GroundTruth
from ffpf.layers import Module
from ffpf.model import FFPF
from ffpf.models import GradCheckEntry, GradCheckReport, ModelConfig
from ffpf.pyramid import BSFPN, ChannelAttention, PlainFPN, cam
from ffpf.spectral import ComplexSpectrum, FourierUnit, irfft2, rfft2
from ffpf.tensor import (
    Tensor,
    add,
    batch_norm,
    carafe_reassemble,
    concat_channels,
    conv2d,
    FiniteDiffResult,
    finite_diff_check,
    global_avg_pool,
    mul,
    pixel_shuffle,
    precision,
    relu,
    scale,
    sigmoid,
    softmax_channels,
    split_channels,
    tensor_sum,
    upsample_nearest2x,
)

logger = logging.getLogger(__name__)

THRESHOLD = 1e-5
ACTIVATION_THRESHOLD = 1e-6
OP_STEP = 1e-5
OP_FLOOR = 1e-6
# Each op is checked at this many seeded input points.
OP_POINTS = 10
# Random unit directions per tensor for the model parts.
PART_DIRECTIONS = 4
# Level 5 of a 32x32 input is 1x1, so with two images its train-mode BN sees
# two values per channel and passes gradients of order eps.
BACKBONE_PARTS = ("backbone_fu_off", "backbone_fu_on", "end_to_end_loss")
BACKBONE_FLOOR = 1e-4
BACKBONE_DIRECTIONS = 2

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class GradCase:
    name: str
    build: Builder
    threshold: float = THRESHOLD
    directions: int = 0
    floor: float = OP_FLOOR
    points: int = 1


def _signed(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Magnitudes in [0.5, 1.5] with random signs; keeps every term visible."""
    return rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


def _leaf(rng: np.random.Generator, shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


def _projection(
    outputs: Callable[[], Sequence[Tensor]], rng: np.random.Generator
) -> Callable[[], Tensor]:
    weights = [Tensor(_signed(rng, t.shape)) for t in outputs()]

    def loss() -> Tensor:
        total: Tensor | None = None
        for t, w in zip(outputs(), weights):
            term = tensor_sum(mul(t, w))
            total = term if total is None else add(total, term)
        assert total is not None
        return total

    return loss


def _module(module: Module, seed: int) -> Module:
    module.initialize(seed)
    return module.astype(np.float64)


# --- single ops ---


def _relu(rng):
    # keep clear of the kink at 0
    x = Tensor(
        rng.uniform(0.1, 1.0, (2, 3, 4, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4, 4)),
        requires_grad=True,
        name="x",
    )
    return _projection(lambda: [relu(x)], rng), [x]


def _sigmoid(rng):
    x = _leaf(rng, (2, 3, 4, 4), "x")
    return _projection(lambda: [sigmoid(x)], rng), [x]


def _add(rng):
    a, b = _leaf(rng, (2, 3, 4, 4), "a"), _leaf(rng, (2, 3, 4, 4), "b")
    return _projection(lambda: [add(a, b)], rng), [a, b]


def _mul(rng):
    a, b = _leaf(rng, (2, 3, 4, 4), "a"), _leaf(rng, (2, 3, 4, 4), "b")
    return _projection(lambda: [mul(a, b)], rng), [a, b]


def _mul_gate(rng):
    gate, x = _leaf(rng, (2, 3, 1, 1), "gate"), _leaf(rng, (2, 3, 4, 4), "x")
    return _projection(lambda: [mul(gate, x)], rng), [gate, x]


def _scale(rng):
    x = _leaf(rng, (2, 3, 4, 4), "x")
    return _projection(lambda: [scale(x, -0.7)], rng), [x]


def _global_avg_pool(rng):
    x = _leaf(rng, (2, 3, 5, 4), "x")
    return _projection(lambda: [global_avg_pool(x)], rng), [x]


def _concat(rng):
    a, b = _leaf(rng, (2, 2, 4, 4), "a"), _leaf(rng, (2, 3, 4, 4), "b")
    return _projection(lambda: [concat_channels(a, b)], rng), [a, b]


def _split(rng):
    x = _leaf(rng, (2, 5, 4, 4), "x")
    return _projection(lambda: list(split_channels(x, 2)), rng), [x]


def _conv(rng):
    x = _leaf(rng, (2, 3, 7, 6), "x")
    w = _leaf(rng, (4, 3, 3, 3), "weight")
    b = _leaf(rng, (4,), "bias")
    pointwise = _leaf(rng, (5, 3, 1, 1), "pointwise")

    def out():
        return [
            conv2d(x, w, b, stride=1, pad=1),
            conv2d(x, w, None, stride=2, pad=1),
            conv2d(x, pointwise, None, stride=2),
        ]

    return _projection(out, rng), [x, w, b, pointwise]


def _bn(training: bool) -> Builder:
    def build(rng):
        x = _leaf(rng, (3, 2, 4, 4), "x")
        gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True, name="gamma")
        beta = _leaf(rng, (2,), "beta")
        mean, var = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)

        def out():
            return [batch_norm(x, gamma, beta, mean.copy(), var.copy(), training=training)]

        return _projection(out, rng), [x, gamma, beta]

    return build


def _upsample(rng):
    x = _leaf(rng, (2, 3, 3, 4), "x")
    return _projection(lambda: [upsample_nearest2x(x)], rng), [x]


def _pixel_shuffle(rng):
    x = _leaf(rng, (2, 8, 3, 3), "x")
    return _projection(lambda: [pixel_shuffle(x, 2)], rng), [x]


def _softmax(rng):
    x = _leaf(rng, (2, 9, 3, 3), "x")
    return _projection(lambda: [softmax_channels(x)], rng), [x]


def _carafe(rng):
    x = _leaf(rng, (2, 3, 4, 4), "x")
    kernels = _leaf(rng, (2, 9, 8, 8), "kernels")
    return _projection(lambda: [carafe_reassemble(x, kernels, 3, 2)], rng), [x, kernels]


def _rfft2(rng):
    x = _leaf(rng, (2, 2, 6, 8), "x")

    def out():
        spectrum = rfft2(x)
        return [spectrum.real, spectrum.imag]

    return _projection(out, rng), [x]


def _irfft2(rng):
    real = _leaf(rng, (2, 2, 6, 5), "real")
    imag = _leaf(rng, (2, 2, 6, 5), "imag")
    return _projection(lambda: [irfft2(ComplexSpectrum(real, imag, 8))], rng), [real, imag]


# --- model parts ---


def _parts(config: ModelConfig, seed: int) -> dict[str, Builder]:
    widths = [s.channels for s in config.stages]
    neck = config.neck_channels

    def fourier_unit(rng):
        unit = _module(FourierUnit(2, init="kaiming"), seed)
        x = _leaf(rng, (2, 2, 8, 8), "x")
        return _projection(lambda: [unit(x)], rng), [x, *unit.parameters()]

    def residual_block(rng):
        block = _module(ResidualBlock(3, 4, stride=2), seed)
        x = _leaf(rng, (2, 3, 8, 8), "x")
        return _projection(lambda: [block(x)], rng), [x, *block.parameters()]

    def channel_attention(rng):
        attention = _module(ChannelAttention(4), seed)
        g = _leaf(rng, (2, 4, 4, 4), "g")
        return _projection(lambda: [cam(g, attention)], rng), [g, *attention.parameters()]

    def backbone(fu: bool) -> Builder:
        def build(rng):
            variant = config.variant(fu=fu, bs_fpn=config.bs_fpn_enabled).model_copy(
                update={"fu_init": "kaiming"}
            )
            net = _module(FResNet(variant), seed)
            image = _leaf(rng, (2, config.in_channels, 32, 32), "image")
            return _projection(lambda: list(net(image)), rng), [image, *net.parameters()]

        return build

    def pyramid_inputs(rng) -> list[Tensor]:
        return [
            _leaf(rng, (2, c, 8 // 2**i, 8 // 2**i), f"level{i + 2}")
            for i, c in enumerate(widths)
        ]

    def neck_check(cls: type[Module]) -> Builder:
        def build(rng):
            module = _module(cls(config, widths), seed)
            levels = pyramid_inputs(rng)
            return _projection(
                lambda: list(module(PyramidFeatures(levels))), rng
            ), [*levels, *module.parameters()]

        return build

    def head(rng):
        module = _module(DetectionHead(config), seed)
        levels = [_leaf(rng, (2, neck, 8 // 2**i, 8 // 2**i), f"level{i + 2}") for i in range(4)]

        def out():
            return [t for pair in module(PyramidFeatures(levels)) for t in pair]

        return _projection(out, rng), [*levels, *module.parameters()]

    def end_to_end(rng):
        model = FFPF(config.model_copy(update={"seed": seed, "fu_init": "kaiming"}))
        model.astype(np.float64)
        images = Tensor(rng.standard_normal((2, config.in_channels, 32, 32)))
        targets = [
            GroundTruth(np.array([[2.0, 2.0, 18.0, 18.0]]), np.array([0])),
            GroundTruth(
                np.array([[10.0, 14.0, 26.0, 30.0], [4.0, 20.0, 12.0, 28.0]]),
                np.array([min(1, config.num_classes - 1), 0]),
            ),
        ]
        return (lambda: model.loss(images, targets)), model.parameters()

    return {
        "fourier_unit": fourier_unit,
        "residual_block": residual_block,
        "channel_attention": channel_attention,
        "backbone_fu_off": backbone(False),
        "backbone_fu_on": backbone(True),
        "bs_fpn": neck_check(BSFPN),
        "plain_fpn": neck_check(PlainFPN),
        "head": head,
        "end_to_end_loss": end_to_end,
    }


def default_cases(config: ModelConfig, seed: int = 0) -> list[GradCase]:
    ops: list[tuple[str, Builder, float]] = [
        ("relu", _relu, ACTIVATION_THRESHOLD),
        ("sigmoid", _sigmoid, ACTIVATION_THRESHOLD),
        ("add", _add, THRESHOLD),
        ("mul", _mul, THRESHOLD),
        ("mul_broadcast", _mul_gate, THRESHOLD),
        ("scale", _scale, THRESHOLD),
        ("global_avg_pool", _global_avg_pool, THRESHOLD),
        ("concat_channels", _concat, THRESHOLD),
        ("split_channels", _split, THRESHOLD),
        ("conv2d", _conv, THRESHOLD),
        ("batch_norm_train", _bn(True), THRESHOLD),
        ("batch_norm_eval", _bn(False), THRESHOLD),
        ("upsample_nearest2x", _upsample, THRESHOLD),
        ("pixel_shuffle", _pixel_shuffle, THRESHOLD),
        ("softmax_channels", _softmax, THRESHOLD),
        ("carafe_reassemble", _carafe, THRESHOLD),
        ("rfft2", _rfft2, THRESHOLD),
        ("irfft2", _irfft2, THRESHOLD),
    ]
    cases = [GradCase(name, build, threshold, points=OP_POINTS) for name, build, threshold in ops]
    for name, build in _parts(config, seed).items():
        if name in BACKBONE_PARTS:
            cases.append(
                GradCase(name, build, directions=BACKBONE_DIRECTIONS, floor=BACKBONE_FLOOR)
            )
        else:
            cases.append(GradCase(name, build, directions=PART_DIRECTIONS))
    return cases


def _check_point(case: GradCase, seed: int) -> FiniteDiffResult:
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        fn, tensors = case.build(rng)
        return finite_diff_check(
            fn,
            tensors,
            step=OP_STEP,
            directions=case.directions,
            seed=seed,
            floor=case.floor,
        )


def run_case(case: GradCase, seed: int = 0) -> GradCheckEntry:
    """Check ``case`` at seeds ``seed .. seed + case.points - 1`` and keep the worst point."""
    worst: FiniteDiffResult | None = None
    for point in range(case.points):
        result = _check_point(case, seed + point)
        if case.points > 1 and result.location is not None:
            result = result.model_copy(update={"location": f"point {point}: {result.location}"})
        if worst is None or not result.max_rel_error <= worst.max_rel_error:
            worst = result
    assert worst is not None
    passed = worst.passed(case.threshold)
    log = logger.info if passed else logger.warning
    log(
        "grad-check %s: max rel error %.3g over %d point(s) (threshold %.0e)",
        case.name,
        worst.max_rel_error,
        case.points,
        case.threshold,
    )
    return GradCheckEntry(
        name=case.name,
        max_rel_error=worst.max_rel_error,
        threshold=case.threshold,
        passed=passed,
        location=worst.location,
    )


def grad_check_suite(
    model_config: ModelConfig | None = None,
    seed: int = 0,
    only: Sequence[str] | None = None,
) -> GradCheckReport:
    """Check every op and model part in float64.

    Args:
        model_config: Configuration the part checks are built from. Defaults to
            ``ModelConfig.tiny()``.
        seed: Seed for inputs, projection weights and direction sampling; op
            checks also use the following ``OP_POINTS - 1`` seeds.
        only: Restrict the run to these case names.

    Returns:
        One entry per case, in the order of ``default_cases``.
    """
    config = model_config or ModelConfig.tiny()
    cases = default_cases(config, seed)
    if only is not None:
        cases = [c for c in cases if c.name in only]
    return GradCheckReport(entries=[run_case(c, seed) for c in cases])
