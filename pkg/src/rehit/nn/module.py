"""Parameter containers and the small layer set shared by every network."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, get_dtype


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(shape, rng: np.random.Generator, bound: float) -> Parameter:
    if bound == 0.0:
        return Parameter(np.zeros(shape, dtype=get_dtype()))
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(get_dtype()))


class Conv2d(Module):
    """Zero-padded convolution.

    ``init="zero"`` zero-initializes weight and bias (residual branch tails,
    prediction heads).  Default init is uniform with variance ``1 / fan_in``.
    """

    def __init__(self, c_in: int, c_out: int, k: int | tuple[int, int], rng: np.random.Generator, *,
                 stride: int = 1, dilation: int = 1, padding=None, groups: int = 1,
                 bias: bool = True, init: str = "default"):
        kh, kw = (k, k) if isinstance(k, int) else k
        if padding is None:
            padding = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
        self.c_in, self.c_out, self.kh, self.kw = c_in, c_out, kh, kw
        self._stride, self._dilation, self._padding, self._groups = stride, dilation, padding, groups
        fan_in = (c_in // groups) * kh * kw
        bound = 0.0 if init == "zero" else math.sqrt(3.0 / fan_in)
        self.weight = _param((c_out, c_in // groups, kh, kw), rng, bound)
        self.bias = Parameter(np.zeros(c_out, dtype=get_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self._stride, dilation=self._dilation,
                          padding=self._padding, groups=self._groups)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ph, pw = ops._pair(self._padding)
        return (ops.conv_output_size(h, self.kh, self._stride, ph, self._dilation),
                ops.conv_output_size(w, self.kw, self._stride, pw, self._dilation))

    def flops(self, h: int, w: int) -> int:
        ho, wo = self.output_size(h, w)
        return 2 * self.kh * self.kw * (self.c_in // self._groups) * self.c_out * ho * wo


class LayerNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=get_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=get_dtype()))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self._eps)


def randomize_(module: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Overwrite every parameter with noise so no branch is zero-initialized.

    Used by the verification harness: gradient checks on a zero-initialized
    residual network would compare zeros with zeros.
    """
    for p in module.parameters():
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.data.dtype)
