"""
Dense NCHW tensors, a tape-based reverse-mode autodiff, and the spatial-domain
primitives the rest of the library composes.

Every differentiable op is a plain function: it computes its output with numpy,
and, when a tape is active and some input requires grad, records an entry with
a backward rule mapping the output gradient to one gradient per input.
"""

import itertools
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel

from ffpf.exceptions import (
    BroadcastError,
    DimensionError,
    GradientError,
    NonFiniteError,
)
from ffpf.settings import get_settings

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_NODE_IDS = itertools.count()
_ACTIVE_TAPE: ContextVar["AutodiffTape | None"] = ContextVar("_ACTIVE_TAPE", default=None)
_PRECISION: ContextVar[type[np.floating]] = ContextVar("_PRECISION", default=np.float32)
_DEBUG = get_settings().DEBUG


def set_debug(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every op."""
    global _DEBUG
    _DEBUG = enabled


@contextmanager
def precision(dtype: type[np.floating]) -> Iterator[None]:
    """Default dtype for newly created tensors.  ``np.float64`` is the shadow mode
    used by gradient checks; ops themselves follow the dtype of their inputs.
    """
    token = _PRECISION.set(dtype)
    try:
        yield
    finally:
        _PRECISION.reset(token)


def current_precision() -> type[np.floating]:
    return _PRECISION.get()


class Tensor:
    """A dense array (usually rank-4 [N, C, H, W]) with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(
        self,
        data: np.ndarray | float | Sequence,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: type[np.floating] | None = None,
    ) -> None:
        self.data = np.array(data, dtype=dtype or current_precision())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_NODE_IDS)
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        out.node_id = next(_NODE_IDS)
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class Parameter(Tensor):
    """A named, optionally trainable tensor owned by a model."""

    __slots__ = ("trainable",)

    def __init__(
        self, data: np.ndarray, name: str, trainable: bool = True
    ) -> None:
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


@dataclass
class AutodiffTape:
    """Ordered record of differentiable ops.  Use as a context manager; ops run
    inside the block are recorded in execution order, so every entry's inputs
    are produced before it.  One tape belongs to one training step.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "AutodiffTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)  # type: ignore[arg-type]
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)


def apply_op(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: BackwardRule,
) -> Tensor:
    """Wrap an op result and record it on the active tape when needed."""
    if _DEBUG and not np.all(np.isfinite(out_data)):
        bad = np.argwhere(~np.isfinite(out_data))[0].tolist()
        raise NonFiniteError(f"{op}: non-finite output at index {bad}")
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape.entries.append(TapeEntry(op, tuple(inputs), out, backward))  # type: ignore[union-attr]
    return out


def backward(
    tape: AutodiffTape,
    loss: Tensor,
    parameters: Sequence[Parameter] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse-mode sweep over ``tape`` from a scalar ``loss``.

    Populates ``.grad`` on every leaf tensor that requires grad.  When
    ``parameters`` is given, returns their gradients by name, with zeros for any
    parameter the loss does not reach.
    """
    if loss.data.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output.node_id, None)
        if g is None:
            continue
        input_grads = entry.backward(g)
        if len(input_grads) != len(entry.inputs):
            raise GradientError(
                f"{entry.op}: backward returned {len(input_grads)} grads "
                f"for {len(entry.inputs)} inputs"
            )
        for t, gi in zip(entry.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
            leaves[t.node_id] = t

    for node_id, t in leaves.items():
        if node_id in grads:
            t.grad = np.asarray(grads[node_id], dtype=t.data.dtype).reshape(t.shape)

    if parameters is None:
        return {}
    out: dict[str, np.ndarray] = {}
    for p in parameters:
        if not p.trainable:
            continue
        if p.node_id not in leaves:
            p.grad = np.zeros_like(p.data)
        out[p.name or str(p.node_id)] = p.grad  # type: ignore[assignment]
    return out


# --- shape helpers ---


def _require_nchw(x: Tensor, op: str) -> tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise DimensionError(f"{op}: expected rank-4 [N,C,H,W] input, got {x.shape}")
    n, c, h, w = x.shape
    return n, c, h, w


def _axis_name(axis: int) -> str:
    return "NCHW"[axis]


def _require_same(a: Tensor, b: Tensor, axes: Sequence[int], op: str) -> None:
    for axis in axes:
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"{op}: axis {_axis_name(axis)} mismatch "
                f"({a.shape[axis]} vs {b.shape[axis]})"
            )


def _channel_vector(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


# --- convolution and normalization ---


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Zero-padded 2-D cross-correlation with a square odd kernel."""
    n, c, h, w = _require_nchw(x, "conv2d")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [Cout,Cin,k,k], got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise DimensionError(
            f"conv2d: axis C mismatch (weight expects {c_in}, input has {c})"
        )
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} or pad={pad}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(
            f"conv2d: bias must have length {c_out} (axis C), got {bias.shape}"
        )
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: axis H/W too small ({h}x{w}) for k={k}, pad={pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    picked = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # im2col rows are (n, y, x), columns (c, ky, kx); backward reuses the same copy
    cols = np.ascontiguousarray(picked.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, -1)
    w_mat = weight.data.reshape(c_out, -1)
    out = np.ascontiguousarray((cols @ w_mat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + _channel_vector(bias.data)

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g_mat.T @ cols).reshape(weight.shape)
        gcols = (g_mat @ w_mat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[
                    :,
                    :,
                    i : i + (ho - 1) * stride + 1 : stride,
                    j : j + (wo - 1) * stride + 1 : stride,
                ] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + w]
        grads: list[np.ndarray | None] = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("conv2d", out, inputs, _backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).  Train mode uses batch
    statistics and updates the running buffers in place; eval mode uses them.
    """
    n, c, h, w = _require_nchw(x, "batch_norm")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm: axis C mismatch (input {c}, gamma {gamma.shape}, "
            f"beta {beta.shape})"
        )
    if eps <= 0:
        raise DimensionError("batch_norm: eps must be positive")

    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean[:] = (1 - momentum) * running_mean + momentum * mean
        running_var[:] = (1 - momentum) * running_var + momentum * unbiased
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - _channel_vector(mean)) * _channel_vector(inv_std)
    out = xhat * _channel_vector(gamma.data) + _channel_vector(beta.data)

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        g_gamma = (g * xhat).sum(axis=(0, 2, 3))
        g_beta = g.sum(axis=(0, 2, 3))
        dxhat = g * _channel_vector(gamma.data)
        if training:
            m = n * h * w
            gx = (
                _channel_vector(inv_std)
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            gx = dxhat * _channel_vector(inv_std)
        return [gx, g_gamma, g_beta]

    return apply_op("batch_norm", out, (x, gamma, beta), _backward)


# --- pointwise ---


def relu(x: Tensor) -> Tensor:
    """ReLU; the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    return apply_op("relu", out, (x,), lambda g: [g * mask])


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0, -x.data)).astype(x.data.dtype)
    return apply_op("sigmoid", out, (x,), lambda g: [g * out * (1 - out)])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise BroadcastError(f"add: shapes must match, got {a.shape} and {b.shape}")
    return apply_op("add", a.data + b.data, (a, b), lambda g: [g, g])


def _is_gate(gate: tuple[int, ...], full: tuple[int, ...]) -> bool:
    return (
        len(gate) == 4
        and len(full) == 4
        and gate[:2] == full[:2]
        and gate[2:] == (1, 1)
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.  Besides equal shapes, the only broadcast allowed is
    a [N,C,1,1] gate against a [N,C,H,W] map (either operand order).
    """
    if a.shape == b.shape:
        return apply_op("mul", a.data * b.data, (a, b), lambda g: [g * b.data, g * a.data])
    if _is_gate(a.shape, b.shape):
        gate, full, gate_first = a, b, True
    elif _is_gate(b.shape, a.shape):
        gate, full, gate_first = b, a, False
    else:
        raise BroadcastError(
            f"mul: only [N,C,1,1] x [N,C,H,W] broadcasting is supported, "
            f"got {a.shape} and {b.shape}"
        )
    out = gate.data * full.data

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        g_gate = (g * full.data).sum(axis=(2, 3), keepdims=True)
        g_full = g * gate.data
        return [g_gate, g_full] if gate_first else [g_full, g_gate]

    return apply_op("mul_broadcast", out, (a, b), _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_op("scale", x.data * factor, (x,), lambda g: [g * factor])


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return apply_op("sum", out, (x,), lambda g: [np.broadcast_to(g, x.shape).copy()])


# --- pooling, resampling, channel plumbing ---


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = _require_nchw(x, "global_avg_pool")
    if h * w < 1:
        raise DimensionError("global_avg_pool: empty spatial extent (axis H/W)")
    scale = 1.0 / (h * w)
    out = x.data.sum(axis=(2, 3), keepdims=True) * scale

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        return [np.broadcast_to(g * scale, x.shape).copy()]

    return apply_op("global_avg_pool", out.astype(x.data.dtype), (x,), _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_nchw(a, "concat_channels")
    _require_nchw(b, "concat_channels")
    _require_same(a, b, (0, 2, 3), "concat_channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return apply_op(
        "concat_channels", out, (a, b), lambda g: [g[:, :ca], g[:, ca:]]
    )


def _slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(x.data[:, start:stop])

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return [gx]

    return apply_op("slice_channels", out, (x,), _backward)


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    _, c, _, _ = _require_nchw(x, "split_channels")
    if not 0 < at < c:
        raise DimensionError(f"split_channels: split point {at} outside (0, {c}) on axis C")
    return _slice_channels(x, 0, at), _slice_channels(x, at, c)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = _require_nchw(x, "upsample_nearest2x")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        return [g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))]

    return apply_op("upsample_nearest2x", out, (x,), _backward)


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, H*r, W*r]."""
    n, cr, h, w = _require_nchw(x, "pixel_shuffle")
    r = factor
    if cr % (r * r):
        raise DimensionError(f"pixel_shuffle: axis C ({cr}) not divisible by {r * r}")
    c = cr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        return [g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape)]

    return apply_op("pixel_shuffle", np.ascontiguousarray(out), (x,), _backward)


def softmax_channels(x: Tensor) -> Tensor:
    _require_nchw(x, "softmax_channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        return [out * (g - (g * out).sum(axis=1, keepdims=True))]

    return apply_op("softmax_channels", out, (x,), _backward)


def carafe_reassemble(x: Tensor, kernels: Tensor, k_up: int, scale: int = 2) -> Tensor:
    """Content-aware reassembly: output (y, x) is the k_up x k_up neighbourhood of
    source (y // scale, x // scale), weighted by that location's kernel.

    ``kernels`` is [N, k_up*k_up, H*scale, W*scale]; the neighbourhood is
    zero-padded at the borders.
    """
    n, c, h, w = _require_nchw(x, "carafe_reassemble")
    kn, kk, kh, kw = _require_nchw(kernels, "carafe_reassemble")
    if kk != k_up * k_up or (kn, kh, kw) != (n, h * scale, w * scale):
        raise DimensionError(
            f"carafe_reassemble: kernels {kernels.shape} do not fit input {x.shape} "
            f"with k_up={k_up}, scale={scale}"
        )
    r = k_up // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))

    def _up(a: np.ndarray) -> np.ndarray:
        return a.repeat(scale, axis=2).repeat(scale, axis=3)

    out = np.zeros((n, c, h * scale, w * scale), dtype=np.result_type(x.data, kernels.data))
    for t in range(kk):
        i, j = divmod(t, k_up)
        out += _up(xp[:, :, i : i + h, j : j + w]) * kernels.data[:, t : t + 1]

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        gk = np.empty_like(kernels.data)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for t in range(kk):
            i, j = divmod(t, k_up)
            gk[:, t] = (g * _up(xp[:, :, i : i + h, j : j + w])).sum(axis=1)
            folded = (g * kernels.data[:, t : t + 1]).reshape(n, c, h, scale, w, scale)
            gxp[:, :, i : i + h, j : j + w] += folded.sum(axis=(3, 5))
        return [gxp[:, :, r : r + h, r : r + w], gk]

    return apply_op("carafe_reassemble", out, (x, kernels), _backward)


# --- gradient checking ---


class FiniteDiffResult(BaseModel):
    max_rel_error: float
    location: str | None
    checked: int

    def passed(self, threshold: float) -> bool:
        return self.max_rel_error < threshold


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    if not (np.isfinite(analytic) and np.isfinite(numeric)):
        return float("inf")
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-4,
    *,
    max_elements: int | None = 64,
    directions: int = 0,
    seed: int = 0,
    floor: float = 1e-8,
) -> FiniteDiffResult:
    """Compare backward against central differences of ``fn``.

    ``fn`` rebuilds a scalar loss from ``tensors`` on every call.  Each tensor is
    checked element-wise (at most ``max_elements`` sampled positions), or, when
    ``directions > 0``, along that many random unit directions, which keeps the
    check meaningful for large parameter sets.  Run under
    ``precision(np.float64)`` with float64 tensors for tight tolerances.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with AutodiffTape() as tape:
        loss = fn()
    backward(tape, loss)

    def _eval() -> float:
        return float(fn().data)

    worst = 0.0
    where: str | None = None
    checked = 0
    for ti, t in enumerate(tensors):
        label = t.name or f"input[{ti}]"
        analytic_grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        if directions > 0:
            for d in range(directions):
                v = rng.standard_normal(t.shape).astype(t.data.dtype)
                v /= max(float(np.linalg.norm(v)), 1e-12)
                original = t.data.copy()
                t.data = original + step * v
                f_plus = _eval()
                t.data = original - step * v
                f_minus = _eval()
                t.data = original
                numeric = (f_plus - f_minus) / (2 * step)
                analytic = float((analytic_grad * v).sum())
                err = _relative_error(analytic, numeric, floor)
                checked += 1
                if err > worst or not np.isfinite(err):
                    worst, where = err, f"{label} direction {d}"
            continue

        flat_indices = np.arange(t.data.size)
        if max_elements is not None and t.data.size > max_elements:
            flat_indices = np.sort(rng.choice(t.data.size, max_elements, replace=False))
        for flat in flat_indices:
            idx = np.unravel_index(int(flat), t.shape) if t.shape else ()
            original = t.data[idx].copy()
            t.data[idx] = original + step
            f_plus = _eval()
            t.data[idx] = original - step
            f_minus = _eval()
            t.data[idx] = original
            numeric = (f_plus - f_minus) / (2 * step)
            analytic = float(analytic_grad[idx])
            err = _relative_error(analytic, numeric, floor)
            checked += 1
            if err > worst or not np.isfinite(err):
                worst, where = err, f"{label}{list(map(int, idx))}"
    return FiniteDiffResult(max_rel_error=worst, location=where, checked=checked)
