"""Orthonormal 2-D Haar transform on ``[B, C, H, W]`` tensors.

Filters are ``low = [1, 1] / sqrt(2)`` and ``high = [-1, 1] / sqrt(2)``.
Subband ``ab`` uses the stride-2 kernel ``outer(a, b)``: the first filter
runs down the rows, the second across the columns.  For a 2x2 block
``[[p, q], [r, s]]``::

    ll = ( p + q + r + s) / 2
    lh = (-p + q - r + s) / 2
    hl = (-p - q + r + s) / 2
    hh = ( p - q - r + s) / 2

The four kernels form an orthogonal 4x4 matrix, so the inverse is its
transpose and the transform preserves the L2 norm.

Packed layout (a frozen wire format): channel blocks in the order
``[ll, lh, hl, hh]``, each block holding all ``C`` input channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .rng import RngStream
from .tensor import Tensor

SUBBANDS = ("ll", "lh", "hl", "hh")

_LOW = np.array([1.0, 1.0]) / np.sqrt(2.0)
_HIGH = np.array([-1.0, 1.0]) / np.sqrt(2.0)


def haar_kernels() -> np.ndarray:
    """The four 2x2 analysis kernels, shape ``[4, 2, 2]`` in subband order."""
    pairs = [(_LOW, _LOW), (_LOW, _HIGH), (_HIGH, _LOW), (_HIGH, _HIGH)]
    return np.stack([np.outer(a, b) for a, b in pairs])


def _analysis(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    blocks = x.reshape(B, C, H // 2, 2, W // 2, 2)
    p = blocks[:, :, :, 0, :, 0]
    q = blocks[:, :, :, 0, :, 1]
    r = blocks[:, :, :, 1, :, 0]
    s = blocks[:, :, :, 1, :, 1]
    out = np.empty((B, 4, C, H // 2, W // 2))
    out[:, 0] = 0.5 * ((p + q) + (r + s))
    out[:, 1] = 0.5 * ((q - p) + (s - r))
    out[:, 2] = 0.5 * ((r + s) - (p + q))
    out[:, 3] = 0.5 * ((p - q) + (s - r))
    return out.reshape(B, 4 * C, H // 2, W // 2)


def _synthesis(y: np.ndarray) -> np.ndarray:
    B, C4, h, w = y.shape
    C = C4 // 4
    bands = y.reshape(B, 4, C, h, w)
    ll, lh, hl, hh = bands[:, 0], bands[:, 1], bands[:, 2], bands[:, 3]
    out = np.empty((B, C, h, 2, w, 2))
    out[:, :, :, 0, :, 0] = 0.5 * ((ll - lh) + (hh - hl))
    out[:, :, :, 0, :, 1] = 0.5 * ((ll + lh) - (hl + hh))
    out[:, :, :, 1, :, 0] = 0.5 * ((ll - lh) + (hl - hh))
    out[:, :, :, 1, :, 1] = 0.5 * ((ll + lh) + (hl + hh))
    return out.reshape(B, C, 2 * h, 2 * w)


def _check_even(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise T.ShapeError(f"{what}: expected [B, C, H, W], got {x.shape}")
    H, W = x.shape[2:]
    if H % 2 or W % 2:
        raise T.ShapeError(f"{what}: spatial extent {H}x{W} must be even")


def dwt_packed(x) -> Tensor:
    """One Haar level, returned packed as ``[B, 4C, H/2, W/2]``."""
    x = T.as_tensor(x)
    _check_even(x, "dwt")
    T.record_flops("dwt", 8 * x.size)  # 4 kernels x 4 taps x 2 per output position
    return T.make_op(_analysis(x.data), (x,), lambda g: (_synthesis(g),), "dwt")


def idwt_packed(y) -> Tensor:
    """Inverse of :func:`dwt_packed`."""
    y = T.as_tensor(y)
    if y.ndim != 4 or y.shape[1] % 4:
        raise T.ShapeError(f"idwt: packed input needs a channel count divisible by 4, got {y.shape}")
    T.record_flops("idwt", 8 * y.size)
    return T.make_op(_synthesis(y.data), (y,), lambda g: (_analysis(g),), "idwt")


@dataclass
class SubbandSet:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    level: int = 1

    def __post_init__(self):
        shapes = {b.shape for b in self.bands()}
        if len(shapes) != 1:
            raise T.ShapeError(f"subbands disagree in shape: {[b.shape for b in self.bands()]}")
        if self.level < 1:
            raise ValueError("level must be positive")

    def bands(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.ll, self.lh, self.hl, self.hh

    @property
    def highs(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.lh, self.hl, self.hh

    def energy(self) -> float:
        return float(sum(np.sum(b.data ** 2) for b in self.bands()))


def pack(s: SubbandSet) -> Tensor:
    return T.concat(list(s.bands()), axis=1)


def unpack(y, level: int = 1) -> SubbandSet:
    y = T.as_tensor(y)
    if y.ndim != 4 or y.shape[1] % 4:
        raise T.ShapeError(f"unpack: channel count of {y.shape} is not divisible by 4")
    return SubbandSet(*T.split(y, 4, axis=1), level=level)


def dwt(x) -> SubbandSet:
    return unpack(dwt_packed(x))


def idwt(s: SubbandSet) -> Tensor:
    return idwt_packed(pack(s))


def multilevel_dwt(x, levels: int) -> Tensor:
    """Full packet decomposition: every packed channel is split again at each level.

    Output shape ``[B, 4**levels * C, H / 2**levels, W / 2**levels]``.
    """
    x = T.as_tensor(x)
    if levels < 0:
        raise ValueError("levels must be non-negative")
    H, W = x.shape[2:]
    if H % (2 ** levels) or W % (2 ** levels):
        raise T.ShapeError(f"multilevel_dwt: {H}x{W} not divisible by 2**{levels}")
    for _ in range(levels):
        x = dwt_packed(x)
    return x


def multilevel_idwt(y, levels: int) -> Tensor:
    y = T.as_tensor(y)
    for _ in range(levels):
        y = idwt_packed(y)
    return y


class WaveletDownsample(Module):
    """Haar-decompose ``levels`` times, then project the packed subbands with a 1x1 conv."""

    def __init__(self, in_channels: int, target_channels: int, levels: int = 1,
                 rng: RngStream | None = None):
        super().__init__()
        self.levels = levels
        self.proj = Conv2d(in_channels * 4 ** levels, target_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(multilevel_dwt(x, self.levels))


def wavelet_downsample_layer(x, proj: Conv2d, levels: int = 1) -> Tensor:
    return proj(multilevel_dwt(x, levels))
