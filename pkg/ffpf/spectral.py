"""
2-D real FFT over the spatial axes, and the Fourier Unit built on it.

The transform is unnormalized forward and 1/(H*W) on the inverse.  Only the
floor(W/2)+1 non-redundant columns are kept; the inverse rebuilds the rest from
Hermitian symmetry, so ``irfft2(rfft2(x)) == x`` for any width.
"""

import logging
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ffpf.exceptions import DimensionError, UnsupportedSizeError
from ffpf.layers import BatchNorm2d, Conv2d, Module
from ffpf.models import BenchRow
from ffpf.tensor import (
    Tensor,
    add,
    apply_op,
    concat_channels,
    mul,
    relu,
    scale,
    split_channels,
)

logger = logging.getLogger(__name__)

SUPPORTED_SIZES = "every extent >= 1 (radix-2 for powers of two, chirp-z otherwise)"


# --- 1-D transforms along the last axis (complex128, unnormalized) ---


@lru_cache(maxsize=64)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=256)
def _twiddles(size: int, sign: int) -> np.ndarray:
    return np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)


def _fft_radix2(a: np.ndarray, sign: int) -> np.ndarray:
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    lead = a.shape[:-1]
    out = a[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = out.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size, sign)
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return out


def _fft_chirp(a: np.ndarray, sign: int) -> np.ndarray:
    """Bluestein's chirp-z: an arbitrary-length DFT as a power-of-two convolution."""
    n = a.shape[-1]
    m = 1 << (2 * n - 2).bit_length()
    k = np.arange(n)
    chirp = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    padded = np.zeros((*a.shape[:-1], m), dtype=np.complex128)
    padded[..., :n] = a * chirp
    kernel = np.zeros(m, dtype=np.complex128)
    kernel[:n] = np.conj(chirp)
    kernel[m - n + 1 :] = np.conj(chirp[1:])[::-1]
    spectrum = _fft_radix2(padded, -1) * _fft_radix2(kernel, -1)
    conv = _fft_radix2(spectrum, 1) / m
    return conv[..., :n] * chirp


def fft_last_axis(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized DFT (or inverse DFT without the 1/n) along the last axis."""
    n = a.shape[-1]
    if n < 1:
        raise UnsupportedSizeError(f"FFT extent {n} is not supported; supported: {SUPPORTED_SIZES}")
    a = np.asarray(a, dtype=np.complex128)
    sign = 1 if inverse else -1
    if n & (n - 1) == 0:
        return _fft_radix2(a, sign)
    return _fft_chirp(a, sign)


def _fft_axis(a: np.ndarray, axis: int, inverse: bool = False) -> np.ndarray:
    moved = np.moveaxis(a, axis, -1)
    return np.moveaxis(fft_last_axis(moved, inverse), -1, axis)


def half_width(width: int) -> int:
    return width // 2 + 1


def _hermitian_weights(width: int) -> np.ndarray:
    """Multiplicity of each stored column in the full spectrum."""
    c = np.full(half_width(width), 2.0)
    c[0] = 1.0
    if width % 2 == 0:
        c[-1] = 1.0
    return c


# --- differentiable transforms ---


def _rfft2_stacked(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise UnsupportedSizeError(
            f"rfft2: spatial size {h}x{w} is not supported; supported: {SUPPORTED_SIZES}"
        )
    wf = half_width(w)
    spec = _fft_axis(_fft_axis(x.data, axis=3)[..., :wf], axis=2)
    out = np.concatenate([spec.real, spec.imag], axis=1).astype(x.data.dtype)

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        gc = g[:, :c] + 1j * g[:, c:]
        t = _fft_axis(gc, axis=2, inverse=True)
        full = np.zeros((n, c, h, w), dtype=np.complex128)
        full[..., :wf] = t
        return [_fft_axis(full, axis=3, inverse=True).real.astype(g.dtype)]

    return apply_op("rfft2", out, (x,), _backward)


def _irfft2_stacked(stacked: Tensor, width: int) -> Tensor:
    n, c2, h, wf = stacked.shape
    c = c2 // 2
    weights = _hermitian_weights(width)
    norm = 1.0 / (h * width)
    spec = stacked.data[:, :c] + 1j * stacked.data[:, c:]
    cols = _fft_axis(spec, axis=2, inverse=True) * weights
    full = np.zeros((n, c, h, width), dtype=np.complex128)
    full[..., :wf] = cols
    out = (_fft_axis(full, axis=3, inverse=True).real * norm).astype(stacked.data.dtype)

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        gs = _fft_axis(_fft_axis(g, axis=3)[..., :wf] * weights, axis=2) * norm
        return [np.concatenate([gs.real, gs.imag], axis=1).astype(g.dtype)]

    return apply_op("irfft2", out, (stacked,), _backward)


@dataclass
class ComplexSpectrum:
    """Half spectrum of a real [N,C,H,W] map: real/imag parts of [N,C,H,W//2+1]."""

    real: Tensor
    imag: Tensor
    source_width: int

    def __post_init__(self) -> None:
        if self.real.shape != self.imag.shape:
            raise DimensionError(
                f"spectrum real {self.real.shape} and imag {self.imag.shape} differ"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def full(self) -> np.ndarray:
        """Symmetry-expanded complex spectrum [N,C,H,W] (for inspection/tests)."""
        n, c, h, wf = self.shape
        w = self.source_width
        half = self.real.data + 1j * self.imag.data
        out = np.zeros((n, c, h, w), dtype=np.complex128)
        out[..., :wf] = half
        rows = (-np.arange(h)) % h
        for k in range(wf, w):
            out[..., k] = np.conj(half[:, :, rows, w - k])
        return out


def rfft2(x: Tensor) -> ComplexSpectrum:
    if x.data.ndim != 4:
        raise DimensionError(f"rfft2: expected rank-4 [N,C,H,W] input, got {x.shape}")
    c = x.shape[1]
    stacked = _rfft2_stacked(x)
    real, imag = split_channels(stacked, c)
    return ComplexSpectrum(real=real, imag=imag, source_width=x.shape[3])


def irfft2(spectrum: ComplexSpectrum) -> Tensor:
    wf = spectrum.shape[3]
    if half_width(spectrum.source_width) != wf:
        raise DimensionError(
            f"irfft2: source_width {spectrum.source_width} implies "
            f"{half_width(spectrum.source_width)} columns on axis W, spectrum has {wf}"
        )
    return _irfft2_stacked(concat_channels(spectrum.real, spectrum.imag), spectrum.source_width)


def spectral_multiply(a: ComplexSpectrum, b: ComplexSpectrum) -> ComplexSpectrum:
    """Pointwise complex product of two half spectra of equal shape."""
    real = add(mul(a.real, b.real), scale(mul(a.imag, b.imag), -1.0))
    imag = add(mul(a.real, b.imag), mul(a.imag, b.real))
    return ComplexSpectrum(real=real, imag=imag, source_width=a.source_width)


# --- Fourier Unit ---


class FourierUnit(Module):
    """1x1 conv-BN-ReLU over stacked real/imag channels, as residual context.

    The frequency-domain conv is bias-free and mixes channels only, never bins.
    Its weights start at zero by default, so a fresh unit is the identity.
    """

    def __init__(self, channels: int, init: str = "zeros") -> None:
        super().__init__()
        self.channels = channels
        self.conv = Conv2d(2 * channels, 2 * channels, 1, bias=False, init=init)
        self.bn = BatchNorm2d(2 * channels)

    def forward(self, x: Tensor) -> Tensor:
        return fourier_unit(x, self)


def spectral_conv(
    spectrum: ComplexSpectrum,
    params: FourierUnit,
    *,
    normalize: bool = True,
    activate: bool = True,
) -> ComplexSpectrum:
    """Cat(real, imag) -> 1x1 conv -> BN -> ReLU -> split.

    ``normalize``/``activate`` bypass BN and ReLU for linear analysis.
    """
    c = spectrum.shape[1]
    if 2 * c != params.conv.weight.shape[1]:
        raise DimensionError(
            f"spectral_conv: spectrum has {c} channels (axis C), "
            f"unit expects {params.conv.weight.shape[1] // 2}"
        )
    y = params.conv(concat_channels(spectrum.real, spectrum.imag))
    if normalize:
        y = params.bn(y)
    if activate:
        y = relu(y)
    real, imag = split_channels(y, c)
    return ComplexSpectrum(real=real, imag=imag, source_width=spectrum.source_width)


def fourier_unit(x: Tensor, params: FourierUnit) -> Tensor:
    """G = iFFT(spectral_conv(FFT(x))) + x; output shape equals input shape."""
    context = irfft2(spectral_conv(rfft2(x), params))
    return add(context, x)


# --- benchmarking ---


def direct_dft2(x: np.ndarray) -> np.ndarray:
    """Quadratic-time 2-D DFT over the last two axes, half spectrum only."""
    h, w = x.shape[-2:]
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(half_width(w))) / w)
    return np.einsum("ky,...yx,xl->...kl", fh, x.astype(np.complex128), fw)


def bench_fft(
    sizes: list[int], repeats: int = 5, channels: int = 16, seed: int = 0
) -> list[BenchRow]:
    """Time rfft2/irfft2 per square size and report their accuracy."""
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    for size in sizes:
        x = Tensor(rng.standard_normal((1, channels, size, size)))
        start = time.perf_counter()
        for _ in range(repeats):
            spec = rfft2(x)
        forward_ms = (time.perf_counter() - start) * 1000 / repeats
        start = time.perf_counter()
        for _ in range(repeats):
            back = irfft2(spec)
        inverse_ms = (time.perf_counter() - start) * 1000 / repeats
        reference = direct_dft2(x.data.astype(np.float64))
        ours = spec.real.data + 1j * spec.imag.data
        row = BenchRow(
            size=size,
            rfft2_ms=round(forward_ms, 3),
            irfft2_ms=round(inverse_ms, 3),
            roundtrip_max_abs=float(np.abs(back.data - x.data).max()),
            dft_max_abs=float(np.abs(ours - reference).max()),
        )
        logger.debug("bench-fft %s", row)
        rows.append(row)
    return rows
