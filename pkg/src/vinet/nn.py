"""Minimal module/parameter containers and convolution layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.op = "param"


class Module:
    """Tracks ``Parameter`` and ``Module`` attributes in assignment order."""

    def __setattr__(self, name, value):
        if isinstance(value, (Parameter, Module)):
            self.__dict__.setdefault("_children", OrderedDict())[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self.__dict__.get("_children", {}).items():
            if isinstance(child, Parameter):
                yield prefix + name, child
            else:
                yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """He-style uniform init, ``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))``."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride=1, padding=0,
                 rng: Optional[np.random.Generator] = None, bias: bool = True):
        kernel = F._triple(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * int(np.prod(kernel))
        dtype = get_default_dtype()
        self.weight = Parameter(uniform_init(rng, (c_out, c_in) + kernel, fan_in), dtype=dtype)
        if bias:
            self.bias = Parameter(np.zeros(c_out), dtype=dtype)
        else:
            self.bias = None
        self.stride = F._triple(stride)
        self.padding = F._triple(padding)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, c_in: int, c_out: int, stride, rng: Optional[np.random.Generator] = None):
        stride = F._triple(stride)
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = get_default_dtype()
        self.weight = Parameter(uniform_init(rng, (c_in, c_out) + stride, c_in), dtype=dtype)
        self.bias = Parameter(np.zeros(c_out), dtype=dtype)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose3d(x, self.weight, self.bias, self.stride)


class SepConv3d(Module):
    """``1 x k x k`` spatial conv, relu, ``k x 1 x 1`` temporal conv (S3D-style)."""

    def __init__(self, c_in: int, c_out: int, k: int = 3,
                 rng: Optional[np.random.Generator] = None):
        self.spatial = Conv3d(c_in, c_out, (1, k, k), padding=(0, k // 2, k // 2), rng=rng)
        self.temporal = Conv3d(c_out, c_out, (k, 1, 1), padding=(k // 2, 0, 0), rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.temporal(self.spatial(x).relu())


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, padding: int = 0,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = get_default_dtype()
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, k), c_in * k), dtype=dtype)
        self.bias = Parameter(np.zeros(c_out), dtype=dtype)
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, padding=self.padding)
