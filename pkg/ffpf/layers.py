"""
Parameter containers.  A ``Module`` owns named ``Parameter``s, non-trainable
buffers (BN running statistics), and child modules; attribute assignment
registers them, so names follow the attribute path (``backbone.stages.0.conv1``).
"""

import zlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from ffpf.exceptions import CheckpointConfigMismatchError
from ffpf.tensor import Parameter, Tensor, batch_norm, conv2d, relu

PRIOR_PROB = 0.01


def _initial_value(init: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape)
    if init == "ones":
        return np.ones(shape)
    if init == "kaiming":
        # normal, fan_out, ReLU gain
        fan_out = shape[0] * int(np.prod(shape[2:])) if len(shape) > 1 else shape[0]
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_out)
    if init == "prior":
        return np.full(shape, -np.log((1 - PRIOR_PROB) / PRIOR_PROB))
    if init.startswith("normal:"):
        return rng.standard_normal(shape) * float(init.split(":", 1)[1])
    raise ValueError(f"unknown init rule {init!r}")


class Module:
    training: bool = True

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_inits", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key: str, value) -> None:
        if isinstance(value, Parameter):
            self._parameters[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def param(self, key: str, shape: tuple[int, ...], init: str) -> Parameter:
        """Register a trainable parameter; values are set by ``initialize``."""
        p = Parameter(np.zeros(shape), name=key)
        setattr(self, key, p)
        self._inits[key] = init
        return p

    def buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        yield from self._children.items()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for key, p in mod._parameters.items():
                yield (f"{mod_name}.{key}" if mod_name else key), p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for key, b in mod._buffers.items():
                yield (f"{mod_name}.{key}" if mod_name else key), b

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable]

    def initialize(self, seed: int) -> None:
        """Assign full names to parameters and draw their initial values.

        Each parameter has its own generator seeded by (seed, CRC32 of its
        name), so adding or removing a module leaves every other module's
        initial weights unchanged.
        """
        for mod_name, mod in self.named_modules():
            for key, p in mod._parameters.items():
                name = f"{mod_name}.{key}" if mod_name else key
                p.name = name
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                init = mod._inits.get(key, "zeros")
                p.data = _initial_value(init, p.shape, rng).astype(np.float32)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype: type[np.floating]) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.astype(np.float32, copy=True)
        for name, b in self.named_buffers():
            state[name] = b.astype(np.float32, copy=True)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {name: p.shape for name, p in self.named_parameters()}
        expected.update({name: b.shape for name, b in self.named_buffers()})
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise CheckpointConfigMismatchError(
                f"state does not fit model: missing={missing[:5]}, "
                f"unexpected={unexpected[:5]}"
            )
        for name, shape in expected.items():
            if tuple(state[name].shape) != tuple(shape):
                raise CheckpointConfigMismatchError(
                    f"{name}: stored shape {state[name].shape} != model shape {shape}"
                )
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=np.float32)
        for name, b in self.named_buffers():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules: list[Module] | None = None) -> None:
        super().__init__()
        self._items: list[Module] = []
        for m in modules or []:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 1,
        stride: int = 1,
        bias: bool = False,
        init: str = "kaiming",
        bias_init: str = "zeros",
    ) -> None:
        super().__init__()
        self.stride = stride
        self.pad = kernel_size // 2
        self.weight = self.param(
            "weight", (out_channels, in_channels, kernel_size, kernel_size), init
        )
        self.bias = self.param("bias", (out_channels,), bias_init) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.param("gamma", (channels,), "ones")
        self.beta = self.param("beta", (channels,), "zeros")
        self.buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBNReLU(Module):
    """conv (bias-free) -> BN -> optional ReLU."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        activate: bool = True,
        init: str = "kaiming",
    ) -> None:
        super().__init__()
        self.activate = activate
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, init=init)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu(y) if self.activate else y
