"""Layer containers with ordered parameters and buffers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from funnet.nn import functional as F
from funnet.nn.tensor import DEFAULT_DTYPE, Parameter, Tensor


class Module:
    """Base class; parameters, buffers and children are discovered in
    attribute-assignment order, which fixes the serialization order."""

    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield f"{prefix}{name}", buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (e.g. float64 for grad checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for k in m._buffers:
                m._buffers[k] = m._buffers[k].astype(dtype)
        return self

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)


def fan_out_normal(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    out_ch, _, kh, kw = shape
    fan_out = kh * kw * out_ch // groups
    std = math.sqrt(2.0 / fan_out)
    return rng.normal(0.0, std, size=shape).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, groups: int = 1,
                 bias: bool = False):
        super().__init__()
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        shape = (cout, cin // groups, kernel, kernel)
        self.weight = Parameter(fan_out_normal(rng, shape, groups))
        self.bias = Parameter(np.zeros(cout, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.01, eps: float = 1e-3):
        super().__init__()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self._buffers["running_mean"] = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self._buffers["running_var"] = np.ones(channels, dtype=DEFAULT_DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(
            x, self.gamma, self.beta, self._buffers["running_mean"],
            self._buffers["running_var"], self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(DEFAULT_DTYPE)
        )
        self.bias = Parameter(np.zeros(fan_out, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class SqueezeExcite(Module):
    def __init__(self, channels: int, reduced: int, rng: np.random.Generator):
        super().__init__()
        self.reduce = Conv2d(channels, reduced, 1, rng, bias=True)
        self.expand = Conv2d(reduced, channels, 1, rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.squeeze_excite(
            x, self.reduce.weight, self.reduce.bias, self.expand.weight, self.expand.bias
        )
