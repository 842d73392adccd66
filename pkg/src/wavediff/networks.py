"""Wavelet-embedded UNet generator and the conditional pair discriminator.

Generator topology for ``M`` levels with channels ``c[i] = base * mult[i]``::

    conv_in -> for each level i: resblocks (+attention) [-> down block + input residual]
            -> bottleneck -> attention -> bottleneck
            -> for each level from the bottom: resblocks on [h, skip] (+attention) [-> up block]
            -> group norm -> SiLU -> conv_out

Every encoder output (conv_in, each resblock, each down block) is pushed on a
skip stack and popped once by the decoder.  Down blocks also push their
high-frequency subbands on a separate stash that the matching up block pops.

With the frequency-aware options switched off the same topology becomes a
plain UNet (average-pool down, nearest up, plain ResNet bottleneck, pooled
input residuals); that variant is kept for compute comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .nn import (AdaptiveGroupNorm, Conv2d, Dense, GroupNorm, Module, SelfAttention)
from .rng import RngStream
from .tensor import Tensor
from .wavelet import WaveletDownsample, dwt_packed, idwt_packed


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture of the denoising generator.

    ``resolution`` is the image resolution; with ``wavelet_input`` the
    network sees ``4 * image_channels`` channels at half that resolution.
    ``attention_resolutions`` are in network-input units.
    """

    image_channels: int = 3
    resolution: int = 32
    wavelet_input: bool = True
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    resblocks_per_scale: int = 2
    attention_resolutions: tuple[int, ...] = (8,)
    latent_dim: int = 100
    latent_mapping_layers: int = 4
    latent_embed_dim: int = 256
    freq_updown: bool = True
    freq_bottleneck: bool = True
    freq_residual: bool = True
    attention_heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "attention_resolutions", tuple(int(r) for r in self.attention_resolutions))
        if self.levels < 1:
            raise ValueError("need at least one level")
        if self.latent_mapping_layers < 1 or self.latent_dim < 1 or self.resblocks_per_scale < 1:
            raise ValueError("latent sizes and resblock count must be positive")
        r = self.input_resolution
        if self.wavelet_input and self.resolution % 2:
            raise ValueError(f"image resolution {self.resolution} must be even for wavelet input")
        if r % 2 ** (self.levels - 1):
            raise ValueError(f"input resolution {r} not divisible by 2**{self.levels - 1}")
        if self.freq_bottleneck and (r // 2 ** (self.levels - 1)) % 2:
            raise ValueError(f"frequency bottleneck needs an even lowest resolution, got {r // 2 ** (self.levels - 1)}")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def in_channels(self) -> int:
        return 4 * self.image_channels if self.wavelet_input else self.image_channels

    @property
    def input_resolution(self) -> int:
        return self.resolution // 2 if self.wavelet_input else self.resolution

    @property
    def time_embed_channels(self) -> int:
        return 4 * self.base_channels

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def input_shape(self) -> tuple[int, int, int]:
        r = self.input_resolution
        return (self.in_channels, r, r)

    def pixel_counterpart(self) -> "GeneratorSpec":
        """Same widths and depth operating on raw pixels with plain resampling."""
        return replace(self, wavelet_input=False, freq_updown=False, freq_bottleneck=False,
                       freq_residual=False,
                       attention_resolutions=tuple(2 * a for a in self.attention_resolutions))


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int
    resolution: int
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    t_embed_dim: int = 128

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.resolution % 2 ** self.levels:
            raise ValueError(f"discriminator input {self.resolution} not divisible by 2**{self.levels}")


def discriminator_spec_for(g: GeneratorSpec, base_channels: int | None = None) -> DiscriminatorSpec:
    """Discriminator with the generator's depth over the generator's data space."""
    base = base_channels or g.base_channels
    return DiscriminatorSpec(in_channels=g.in_channels, resolution=g.input_resolution,
                             base_channels=base, channel_multipliers=g.channel_multipliers,
                             t_embed_dim=4 * base)


# -- building blocks ---------------------------------------------------------

def _bc(t: Tensor) -> Tensor:
    """[B, C] -> [B, C, 1, 1]."""
    return T.reshape(t, t.shape + (1, 1))


class ResBlock(Module):
    """norm(z) -> SiLU -> conv -> + time -> norm(z) -> SiLU -> conv, plus the skip path."""

    def __init__(self, cin: int, cout: int, t_dim: int, z_dim: int, rng: RngStream | None):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.norm0 = AdaptiveGroupNorm(cin, z_dim, rng)
        self.conv0 = Conv2d(cin, cout, 3, rng)
        self.t_proj = Dense(t_dim, cout, rng)
        self.norm1 = AdaptiveGroupNorm(cout, z_dim, rng)
        self.conv1 = Conv2d(cout, cout, 3, rng)
        if cin != cout:
            self.skip = Conv2d(cin, cout, 1, rng)
        else:
            self.skip = None

    def forward(self, x: Tensor, temb: Tensor, zemb: Tensor) -> Tensor:
        h = self.conv0(T.silu(self.norm0(x, zemb)))
        h = T.add(h, _bc(self.t_proj(T.silu(temb))))
        h = self.conv1(T.silu(self.norm1(h, zemb)))
        s = self.skip(x) if self.skip is not None else x
        return T.add(s, h)


class BlockState:
    """High-frequency stash shared by down and up blocks during one forward pass."""

    def __init__(self):
        self._stack: list[Tensor] = []
        self.pushed = 0
        self.popped = 0

    def push(self, highs: Tensor) -> None:
        self._stack.append(highs)
        self.pushed += 1

    def pop(self) -> Tensor:
        if not self._stack:
            raise RuntimeError("up block found no stashed high-frequency subbands")
        self.popped += 1
        return self._stack.pop()

    def __len__(self) -> int:
        return len(self._stack)

    def assert_drained(self) -> None:
        if self._stack or self.pushed != self.popped:
            raise RuntimeError(f"high-frequency stash leak: pushed {self.pushed}, popped {self.popped}")


class FreqDownBlock(Module):
    """ResNet block followed by a Haar split: returns (ll, packed [lh, hl, hh])."""

    def __init__(self, channels: int, t_dim: int, z_dim: int, rng):
        super().__init__()
        self.channels = channels
        self.res = ResBlock(channels, channels, t_dim, z_dim, rng)

    def forward(self, x: Tensor, temb: Tensor, zemb: Tensor):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise T.ShapeError(f"freq_down_block needs even spatial dims, got {x.shape}")
        y = dwt_packed(self.res(x, temb, zemb))
        c = self.channels
        return y[:, :c], y[:, c:]


class PlainDownBlock(Module):
    def __init__(self, channels: int, t_dim: int, z_dim: int, rng):
        super().__init__()
        self.res = ResBlock(channels, channels, t_dim, z_dim, rng)

    def forward(self, x, temb, zemb):
        return T.avg_pool2(self.res(x, temb, zemb)), None


class FreqUpBlock(Module):
    """Fuse stored highs with the ll path (1x1 conv), inverse Haar, concat skip, ResNet block."""

    def __init__(self, cin: int, c_high: int, c_skip: int, cout: int, t_dim: int, z_dim: int, rng):
        super().__init__()
        self.cin = cin
        self.fuse = Conv2d(cin + 3 * c_high, 4 * cin, 1, rng)
        self.res = ResBlock(cin + c_skip, cout, t_dim, z_dim, rng)

    def upsample(self, x: Tensor, highs: Tensor) -> Tensor:
        if highs is None or highs.shape[2:] != x.shape[2:]:
            raise T.ShapeError("freq_up_block: stashed highs missing or mis-shaped")
        return idwt_packed(self.fuse(T.concat([x, highs], axis=1)))

    def forward(self, x, highs, skip, temb, zemb):
        up = self.upsample(x, highs)
        return self.res(T.concat([up, skip], axis=1), temb, zemb)


class PlainUpBlock(Module):
    def __init__(self, cin: int, c_skip: int, cout: int, t_dim: int, z_dim: int, rng):
        super().__init__()
        self.res = ResBlock(cin + c_skip, cout, t_dim, z_dim, rng)

    def forward(self, x, highs, skip, temb, zemb):
        return self.res(T.concat([T.upsample_nearest2(x), skip], axis=1), temb, zemb)


class FreqBottleneck(Module):
    """Process only the ll subband; the three high subbands pass through untouched."""

    def __init__(self, channels: int, t_dim: int, z_dim: int, rng):
        super().__init__()
        self.channels = channels
        self.res = ResBlock(channels, channels, t_dim, z_dim, rng)

    def forward(self, x, temb, zemb):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise T.ShapeError(f"freq_bottleneck_block needs even spatial dims, got {x.shape}")
        y = dwt_packed(x)
        c = self.channels
        ll = self.res(y[:, :c], temb, zemb)
        return idwt_packed(T.concat([ll, y[:, c:]], axis=1))


class PlainBottleneck(Module):
    def __init__(self, channels: int, t_dim: int, z_dim: int, rng):
        super().__init__()
        self.res = ResBlock(channels, channels, t_dim, z_dim, rng)

    def forward(self, x, temb, zemb):
        return self.res(x, temb, zemb)


class PooledResidual(Module):
    """Input shortcut via repeated 2x2 average pooling and a 1x1 projection."""

    def __init__(self, cin: int, cout: int, levels: int, rng):
        super().__init__()
        self.levels = levels
        self.proj = Conv2d(cin, cout, 1, rng)

    def forward(self, x):
        for _ in range(self.levels):
            x = T.avg_pool2(x)
        return self.proj(x)


class Generator(Module):
    def __init__(self, spec: GeneratorSpec, rng: RngStream | None = None):
        super().__init__()
        self.spec = spec
        c = spec.channels
        M, nres = spec.levels, spec.resblocks_per_scale
        tdim, zdim, base = spec.time_embed_channels, spec.latent_embed_dim, spec.base_channels
        res0 = spec.input_resolution

        self.t_embed = [Dense(base, tdim, rng), Dense(tdim, tdim, rng)]
        self.z_map = [Dense(spec.latent_dim, zdim, rng)] + [
            Dense(zdim, zdim, rng) for _ in range(spec.latent_mapping_layers - 1)]
        self.conv_in = Conv2d(spec.in_channels, c[0], 3, rng)

        skip_ch = [c[0]]
        ch = c[0]
        enc, enc_attn, downs, residuals = [], [], [], []
        for i in range(M):
            res = res0 // 2 ** i
            for _ in range(nres):
                enc.append(ResBlock(ch, c[i], tdim, zdim, rng))
                ch = c[i]
                enc_attn.append(SelfAttention(ch, rng, spec.attention_heads) if res in spec.attention_resolutions else None)
                skip_ch.append(ch)
            if i < M - 1:
                down_cls = FreqDownBlock if spec.freq_updown else PlainDownBlock
                downs.append(down_cls(ch, tdim, zdim, rng))
                if spec.freq_residual:
                    residuals.append(WaveletDownsample(spec.in_channels, ch, i + 1, rng))
                else:
                    residuals.append(PooledResidual(spec.in_channels, ch, i + 1, rng))
                skip_ch.append(ch)
        self.enc = enc
        self.enc_attn_index = [k for k, a in enumerate(enc_attn) if a is not None]
        self.enc_attn = [a for a in enc_attn if a is not None]
        self.downs = downs
        self.residuals = residuals

        mid_cls = FreqBottleneck if spec.freq_bottleneck else PlainBottleneck
        self.mid = [mid_cls(ch, tdim, zdim, rng), mid_cls(ch, tdim, zdim, rng)]
        self.mid_attn = SelfAttention(ch, rng, spec.attention_heads)

        dec, dec_attn, ups = [], [], []
        for i in reversed(range(M)):
            res = res0 // 2 ** i
            for _ in range(nres + 1 if i == M - 1 else nres):
                dec.append(ResBlock(ch + skip_ch.pop(), c[i], tdim, zdim, rng))
                ch = c[i]
                dec_attn.append(SelfAttention(ch, rng, spec.attention_heads) if res in spec.attention_resolutions else None)
            if i > 0:
                s = skip_ch.pop()
                if spec.freq_updown:
                    ups.append(FreqUpBlock(ch, c[i - 1], s, c[i - 1], tdim, zdim, rng))
                else:
                    ups.append(PlainUpBlock(ch, s, c[i - 1], tdim, zdim, rng))
                ch = c[i - 1]
                dec_attn.append(SelfAttention(ch, rng, spec.attention_heads)
                                if res0 // 2 ** (i - 1) in spec.attention_resolutions else None)
        assert not skip_ch
        self.dec = dec
        self.ups = ups
        self._dec_attn_flags = [a is not None for a in dec_attn]
        self.dec_attn = [a for a in dec_attn if a is not None]
        self.out_norm = GroupNorm(ch)
        self.conv_out = Conv2d(ch, spec.in_channels, 3, rng, zero_init=True)
        self.last_state: BlockState | None = None

    def embed(self, z: Tensor, t) -> tuple[Tensor, Tensor]:
        t = np.asarray(t).reshape(-1)
        temb = T.sinusoidal_embedding(t, self.spec.base_channels)
        temb = self.t_embed[1](T.silu(self.t_embed[0](temb)))
        zemb = T.pixel_norm(z)
        for layer in self.z_map:
            zemb = T.silu(layer(zemb))
        return temb, zemb

    def forward(self, y: Tensor, z: Tensor, t) -> Tensor:
        spec = self.spec
        y = T.as_tensor(y)
        z = T.as_tensor(z)
        if y.ndim != 4 or y.shape[1:] != spec.input_shape():
            raise T.ShapeError(f"generator expects [B, {spec.input_shape()}], got {y.shape}")
        if z.shape != (y.shape[0], spec.latent_dim):
            raise T.ShapeError(f"latent must be [{y.shape[0]}, {spec.latent_dim}], got {z.shape}")
        temb, zemb = self.embed(z, t)
        state = BlockState()
        self.last_state = state
        M, nres = spec.levels, spec.resblocks_per_scale
        attn_at = dict(zip(self.enc_attn_index, self.enc_attn))

        h = self.conv_in(y)
        skips = [h]
        k = 0
        for i in range(M):
            for _ in range(nres):
                h = self.enc[k](h, temb, zemb)
                if k in attn_at:
                    h = attn_at[k](h)
                skips.append(h)
                k += 1
            if i < M - 1:
                h, highs = self.downs[i](h, temb, zemb)
                if highs is not None:
                    state.push(highs)
                h = T.add(h, self.residuals[i](y))
                skips.append(h)

        h = self.mid[0](h, temb, zemb)
        h = self.mid_attn(h)
        h = self.mid[1](h, temb, zemb)

        k = 0
        a = 0
        flags = iter(self._dec_attn_flags)
        for i in reversed(range(M)):
            for _ in range(nres + 1 if i == M - 1 else nres):
                h = self.dec[k](T.concat([h, skips.pop()], axis=1), temb, zemb)
                k += 1
                if next(flags):
                    h = self.dec_attn[a](h)
                    a += 1
            if i > 0:
                highs = state.pop() if spec.freq_updown else None
                h = self.ups[M - 1 - i](h, highs, skips.pop(), temb, zemb)
                if next(flags):
                    h = self.dec_attn[a](h)
                    a += 1
        if skips:
            raise RuntimeError(f"{len(skips)} skip connections left unconsumed")
        state.assert_drained()
        return self.conv_out(T.silu(self.out_norm(h)))


class DiscBlock(Module):
    """conv -> +time -> conv, 2x average-pool, with a pooled 1x1 skip; output scaled by 1/sqrt(2)."""

    def __init__(self, cin: int, cout: int, t_dim: int, rng):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.t_proj = Dense(t_dim, cout, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng, bias=False)

    def forward(self, x, temb):
        h = T.leaky_relu(self.conv1(x))
        h = T.add(h, _bc(self.t_proj(temb)))
        h = T.avg_pool2(T.leaky_relu(self.conv2(h)))
        s = T.avg_pool2(self.skip(x))
        return T.scale(T.add(h, s), 1.0 / math.sqrt(2.0))


class Discriminator(Module):
    """Scores (y_{t-1}, y_t, t) triples; one logit per sample."""

    def __init__(self, spec: DiscriminatorSpec, rng: RngStream | None = None):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.t_embed = [Dense(spec.base_channels, spec.t_embed_dim, rng),
                        Dense(spec.t_embed_dim, spec.t_embed_dim, rng)]
        self.stem = Conv2d(2 * spec.in_channels, c[0], 3, rng)
        blocks, ch = [], c[0]
        for ci in c:
            blocks.append(DiscBlock(ch, ci, spec.t_embed_dim, rng))
            ch = ci
        self.blocks = blocks
        self.head = Dense(ch, 1, rng)

    def forward(self, y_prev, y_t, t) -> Tensor:
        y_prev, y_t = T.as_tensor(y_prev), T.as_tensor(y_t)
        if y_prev.shape != y_t.shape:
            raise T.ShapeError(f"pair shapes differ: {y_prev.shape} vs {y_t.shape}")
        expect = (self.spec.in_channels, self.spec.resolution, self.spec.resolution)
        if y_prev.ndim != 4 or y_prev.shape[1:] != expect:
            raise T.ShapeError(f"discriminator expects [B, {expect}], got {y_prev.shape}")
        t = np.asarray(t).reshape(-1)
        temb = T.sinusoidal_embedding(t, self.spec.base_channels)
        temb = T.leaky_relu(self.t_embed[1](T.leaky_relu(self.t_embed[0](temb))))
        h = T.leaky_relu(self.stem(T.concat([y_prev, y_t], axis=1)))
        for block in self.blocks:
            h = block(h, temb)
        h = T.mean(T.leaky_relu(h), axis=(2, 3))
        return T.reshape(self.head(h), (h.shape[0],))


# -- presets -------------------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    spec: GeneratorSpec
    steps: int
    description: str
    trainable: bool = True


DESK = GeneratorSpec()

PRESETS: dict[str, Preset] = {
    "desk": Preset(DESK, 4, "32x32 RGB, wavelet input 12x16x16, CIFAR-style 4 steps"),
    "desk-2step": Preset(DESK, 2, "desk network with CelebA-style 2 steps"),
    "desk-gray": Preset(replace(DESK, image_channels=1), 4, "32x32 grayscale"),
    "smoke": Preset(GeneratorSpec(image_channels=3, resolution=8, base_channels=8,
                                  channel_multipliers=(1, 2), attention_resolutions=(),
                                  latent_dim=16, latent_embed_dim=32), 2,
                    "8x8 RGB toy network for fast end-to-end runs"),
    "tiny": Preset(GeneratorSpec(image_channels=1, resolution=16, base_channels=8,
                                 channel_multipliers=(1, 1), attention_resolutions=(4,),
                                 latent_dim=8, latent_embed_dim=16), 2,
                   "2-level 8-channel network on 8x8 wavelet input (gradient checks)"),
    # full-scale configurations: accounting only
    "cifar10": Preset(GeneratorSpec(resolution=32, base_channels=128, channel_multipliers=(1, 2, 2),
                                    attention_resolutions=(), freq_updown=False, freq_bottleneck=False,
                                    freq_residual=False), 4,
                      "CIFAR-10 wavelet diffusion (no wavelet-embedded blocks)", trainable=False),
    "cifar10-pixel": Preset(GeneratorSpec(resolution=32, wavelet_input=False, base_channels=128,
                                          channel_multipliers=(1, 2, 2, 2), attention_resolutions=(16,),
                                          freq_updown=False, freq_bottleneck=False, freq_residual=False), 4,
                            "CIFAR-10 pixel-space baseline", trainable=False),
    "stl10": Preset(GeneratorSpec(resolution=64, base_channels=128, channel_multipliers=(1, 2, 2, 2),
                                  attention_resolutions=(16,)), 4,
                    "STL-10 with wavelet-embedded generator", trainable=False),
    "stl10-pixel": Preset(GeneratorSpec(resolution=64, wavelet_input=False, base_channels=128,
                                        channel_multipliers=(1, 2, 2, 2), attention_resolutions=(16,),
                                        freq_updown=False, freq_bottleneck=False, freq_residual=False), 4,
                          "STL-10 pixel-space baseline", trainable=False),
    "celeba256": Preset(GeneratorSpec(resolution=256, base_channels=64, channel_multipliers=(1, 2, 2, 2, 4),
                                      attention_resolutions=(16,)), 2,
                        "CelebA-HQ 256 / LSUN with wavelet-embedded generator", trainable=False),
    "celeba256-pixel": Preset(GeneratorSpec(resolution=256, wavelet_input=False, base_channels=64,
                                            channel_multipliers=(1, 1, 2, 2, 4, 4), attention_resolutions=(16,),
                                            freq_updown=False, freq_bottleneck=False, freq_residual=False), 2,
                              "CelebA-HQ 256 pixel-space baseline", trainable=False),
    "celeba512": Preset(GeneratorSpec(resolution=512, base_channels=64, channel_multipliers=(1, 1, 2, 2, 4, 4),
                                      attention_resolutions=(16,)), 2,
                        "CelebA-HQ 512 with wavelet-embedded generator", trainable=False),
    "celeba512-pixel": Preset(GeneratorSpec(resolution=512, wavelet_input=False, base_channels=64,
                                            channel_multipliers=(1, 1, 2, 2, 4, 4), attention_resolutions=(16,),
                                            freq_updown=False, freq_bottleneck=False, freq_residual=False), 2,
                              "CelebA-HQ 512 pixel-space baseline", trainable=False),
}
