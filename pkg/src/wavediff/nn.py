"""Parameter containers and the small set of layers the networks use."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-registered tree of parameters and sub-modules.

    Registration order is insertion order, so parameter names and their
    enumeration order are stable across runs.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            value = ModuleList(value)
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for n, p in own.items():
            arr = np.asarray(state[n], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{n}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = np.ascontiguousarray(arr)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        object.__setattr__(self, "_items", list(modules))
        for i, m in enumerate(self._items):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _normal(rng: RngStream | None, shape, fan_in: int) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    return rng.normal(shape) / math.sqrt(fan_in)


class Conv2d(Module):
    """3x3 (or any odd/1x1) convolution; weights ~ N(0, 1/fan_in), bias zero."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, rng: RngStream | None = None,
                 stride: int = 1, padding: int | None = None, pad_mode: str = "zeros",
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.pad_mode = pad_mode
        fan_in = cin * kernel * kernel
        w = np.zeros((cout, cin, kernel, kernel)) if zero_init else _normal(rng, (cout, cin, kernel, kernel), fan_in)
        self.weight = Parameter(w)
        if bias:
            self.bias = Parameter(np.zeros(cout))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: RngStream | None = None, zero_init: bool = False):
        super().__init__()
        self.weight = Parameter(np.zeros((n_out, n_in)) if zero_init else _normal(rng, (n_out, n_in), n_in))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


def num_groups(channels: int) -> int:
    """Largest divisor of ``channels`` not above min(32, C // 4); at least 1."""
    g = max(1, min(32, channels // 4))
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-6):
        super().__init__()
        self.groups = groups or num_groups(channels)
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class AdaptiveGroupNorm(Module):
    """Group norm whose per-channel scale and shift are predicted from a style vector.

    ``[gamma, beta] = dense(z)`` and ``out = gamma * norm(x) + beta``.  The
    scale half of the dense bias starts at one, so gamma is centred on 1.
    """

    def __init__(self, channels: int, style_dim: int, rng: RngStream | None = None, eps: float = 1e-6):
        super().__init__()
        self.channels = channels
        self.groups = num_groups(channels)
        self.eps = eps
        self.style = Dense(style_dim, 2 * channels, rng)
        self.style.bias.data = np.concatenate([np.ones(channels), np.zeros(channels)])

    def forward(self, x: Tensor, style: Tensor) -> Tensor:
        B, C = x.shape[:2]
        h = T.group_norm(x, self.groups, eps=self.eps)
        s = self.style(style)
        gamma = T.reshape(s[:, :C], (B, C, 1, 1))
        beta = T.reshape(s[:, C:], (B, C, 1, 1))
        return T.add(T.mul(h, gamma), beta)


class SelfAttention(Module):
    """Single- or multi-head residual attention block over spatial tokens."""

    def __init__(self, channels: int, rng: RngStream | None = None, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.norm = GroupNorm(channels)
        self.q = Conv2d(channels, channels, 1, rng)
        self.k = Conv2d(channels, channels, 1, rng)
        self.v = Conv2d(channels, channels, 1, rng)
        self.out = Conv2d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.self_attention(x, self.q.weight, self.k.weight, self.v.weight, self.out.weight,
                                self.q.bias, self.k.bias, self.v.bias, self.out.bias,
                                heads=self.heads, norm_groups=self.norm.groups,
                                gamma=self.norm.gamma, beta=self.norm.beta)
