"""Analytic parameter, FLOP and activation-memory accounting.

Costs are derived from a spec alone by walking an explicit layer plan; no
network is instantiated.  Conventions:

* FLOPs are 2 x multiply-accumulates.  conv: ``2 Cin Cout kh kw Ho Wo``;
  dense: ``2 M N``; Haar DWT/IDWT: ``8`` per input element (four 2x2
  kernels); 2x2 average pooling: ``2`` per input element; attention over
  ``N`` tokens of width ``C``: ``8 N C^2 + 4 N^2 C`` (four 1x1 projections
  plus the two token products).  Bias adds, normalisation, activations and
  resampling copies are not counted.
* Everything is at batch 1.
* Activation memory is the peak, over the plan, of the bytes held by live
  tensors (network inputs, embeddings, skip and high-frequency stashes, the
  current block input and the layer output) at 4 bytes per element.

Row names follow the parameter-name prefixes of the live modules, so a plan
row can be matched to the parameters it accounts for.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .networks import DiscriminatorSpec, GeneratorSpec

BYTES_PER_ELEMENT = 4


class UnsupportedLayer(ValueError):
    pass


@dataclass
class LayerRow:
    name: str
    kind: str
    out_shape: tuple[int, ...]
    params: int
    flops: int
    live_bytes: int


@dataclass
class CostReport:
    params: int
    flops: int
    activation_mem: int
    rows: list[LayerRow] = field(default_factory=list)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rows:
            out[r.kind] = out.get(r.kind, 0) + r.flops
        return out

    def row(self, name: str) -> LayerRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def table(self) -> str:
        lines = [f"{'layer':40s} {'kind':10s} {'out':>16s} {'params':>10s} {'flops':>14s}"]
        for r in self.rows:
            lines.append(f"{r.name:40s} {r.kind:10s} {'x'.join(map(str, r.out_shape)):>16s} "
                         f"{r.params:10d} {r.flops:14d}")
        lines.append(f"{'total':40s} {'':10s} {'':>16s} {self.params:10d} {self.flops:14d}")
        lines.append(f"peak activation memory: {self.activation_mem} bytes")
        return "\n".join(lines)


def _numel(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


class _Plan:
    """Accumulates rows and tracks live tensor bytes."""

    def __init__(self):
        self.rows: list[LayerRow] = []
        self.live: dict[int, int] = {}
        self.peak = 0
        self._next = 0

    def alloc(self, shape) -> int:
        h = self._next
        self._next += 1
        self.live[h] = _numel(shape) * BYTES_PER_ELEMENT
        self.peak = max(self.peak, sum(self.live.values()))
        return h

    def free(self, *handles: int) -> None:
        for h in handles:
            self.live.pop(h, None)

    def row(self, name, kind, out_shape, params, flops) -> int:
        h = self.alloc(out_shape)
        self.rows.append(LayerRow(name, kind, tuple(out_shape), int(params), int(flops),
                                  sum(self.live.values())))
        return h

    # primitive layers -----------------------------------------------------
    def conv(self, name, cin, cout, k, hw, bias=True):
        h, w = hw
        return self.row(name, "conv", (cout, h, w), cin * cout * k * k + (cout if bias else 0),
                        2 * cin * cout * k * k * h * w)

    def dense(self, name, n_in, n_out):
        return self.row(name, "dense", (n_out,), n_in * n_out + n_out, 2 * n_in * n_out)

    def norm(self, name, c, hw):
        return self.row(name, "norm", (c,) + tuple(hw), 2 * c, 0)

    def dwt(self, name, c, hw):
        h, w = hw
        if h % 2 or w % 2:
            raise UnsupportedLayer(f"{name}: Haar split needs even dims, got {h}x{w}")
        return self.row(name, "dwt", (4 * c, h // 2, w // 2), 0, 8 * c * h * w)

    def idwt(self, name, c4, hw):
        h, w = hw
        return self.row(name, "idwt", (c4 // 4, 2 * h, 2 * w), 0, 8 * c4 * h * w)

    def pool(self, name, c, hw):
        h, w = hw
        return self.row(name, "avgpool", (c, h // 2, w // 2), 0, 2 * c * h * w)

    def attention(self, name, c, hw):
        n = hw[0] * hw[1]
        return self.row(name, "attention", (c,) + tuple(hw), 4 * c * c + 4 * c + 2 * c,
                        8 * n * c * c + 4 * n * n * c)


def _resblock(p: _Plan, name: str, cin: int, cout: int, hw, tdim: int, zdim: int) -> None:
    """Adaptive-norm ResNet block; rows for both style projections, t-projection and convs."""
    tmp = [p.dense(f"{name}.norm0.style", zdim, 2 * cin),
           p.conv(f"{name}.conv0", cin, cout, 3, hw),
           p.dense(f"{name}.t_proj", tdim, cout),
           p.dense(f"{name}.norm1.style", zdim, 2 * cout),
           p.conv(f"{name}.conv1", cout, cout, 3, hw)]
    if cin != cout:
        tmp.append(p.conv(f"{name}.skip", cin, cout, 1, hw))
    p.free(*tmp)


def _generator_plan(spec: GeneratorSpec) -> _Plan:
    p = _Plan()
    c = spec.channels
    M, nres = spec.levels, spec.resblocks_per_scale
    tdim, zdim, base = spec.time_embed_channels, spec.latent_embed_dim, spec.base_channels
    r0 = spec.input_resolution
    attn = set(spec.attention_resolutions)

    y_in = p.alloc(spec.input_shape())
    p.alloc((spec.latent_dim,))
    temb = [p.dense("t_embed.0", base, tdim), p.dense("t_embed.1", tdim, tdim)]
    p.free(temb[0])
    zh = p.dense("z_map.0", spec.latent_dim, zdim)
    for i in range(1, spec.latent_mapping_layers):
        nxt = p.dense(f"z_map.{i}", zdim, zdim)
        p.free(zh)
        zh = nxt

    cur = p.conv("conv_in", spec.in_channels, c[0], 3, (r0, r0))
    skips = [(cur, c[0])]
    ch, k, a = c[0], 0, 0
    stash = []
    for i in range(M):
        r = r0 // 2 ** i
        for _ in range(nres):
            _resblock(p, f"enc.{k}", ch, c[i], (r, r), tdim, zdim)
            ch = c[i]
            cur = p.alloc((ch, r, r))
            if r in attn:
                cur = p.attention(f"enc_attn.{a}", ch, (r, r))
                a += 1
            skips.append((cur, ch))
            k += 1
        if i < M - 1:
            _resblock(p, f"downs.{i}.res", ch, ch, (r, r), tdim, zdim)
            if spec.freq_updown:
                packed = p.dwt(f"downs.{i}.dwt", ch, (r, r))
                stash.append(p.alloc((3 * ch, r // 2, r // 2)))
                p.free(packed)
            else:
                p.free(p.pool(f"downs.{i}.pool", ch, (r, r)))
            levels = i + 1
            if spec.freq_residual:
                n = spec.in_channels
                for j in range(levels):
                    p.free(p.dwt(f"residuals.{i}.dwt{j}", n, (r0 // 2 ** j, r0 // 2 ** j)))
                    n *= 4
                res = p.conv(f"residuals.{i}.proj", n, ch, 1, (r // 2, r // 2))
            else:
                for j in range(levels):
                    p.free(p.pool(f"residuals.{i}.pool{j}", spec.in_channels, (r0 // 2 ** j, r0 // 2 ** j)))
                res = p.conv(f"residuals.{i}.proj", spec.in_channels, ch, 1, (r // 2, r // 2))
            p.free(res)
            cur = p.alloc((ch, r // 2, r // 2))
            skips.append((cur, ch))
    p.free(y_in)

    rb = r0 // 2 ** (M - 1)
    for j, label in ((0, "mid.0"), (None, "mid_attn"), (1, "mid.1")):
        if j is None:
            p.free(p.attention(label, ch, (rb, rb)))
            continue
        if spec.freq_bottleneck:
            p.free(p.dwt(f"{label}.dwt", ch, (rb, rb)))
            _resblock(p, f"{label}.res", ch, ch, (rb // 2, rb // 2), tdim, zdim)
            p.free(p.idwt(f"{label}.idwt", 4 * ch, (rb // 2, rb // 2)))
        else:
            _resblock(p, f"{label}.res", ch, ch, (rb, rb), tdim, zdim)

    k, a, u = 0, 0, 0
    for i in reversed(range(M)):
        r = r0 // 2 ** i
        for _ in range(nres + 1 if i == M - 1 else nres):
            sh, sc = skips.pop()
            _resblock(p, f"dec.{k}", ch + sc, c[i], (r, r), tdim, zdim)
            p.free(sh)
            ch = c[i]
            k += 1
            if r in attn:
                p.free(p.attention(f"dec_attn.{a}", ch, (r, r)))
                a += 1
        if i > 0:
            sh, sc = skips.pop()
            if spec.freq_updown:
                hi = stash.pop()
                fused = p.conv(f"ups.{u}.fuse", ch + 3 * c[i - 1], 4 * ch, 1, (r, r))
                p.free(hi)
                p.free(p.idwt(f"ups.{u}.idwt", 4 * ch, (r, r)), fused)
            _resblock(p, f"ups.{u}.res", ch + sc, c[i - 1], (2 * r, 2 * r), tdim, zdim)
            p.free(sh)
            ch = c[i - 1]
            u += 1
            if 2 * r in attn:
                p.free(p.attention(f"dec_attn.{a}", ch, (2 * r, 2 * r)))
                a += 1
    if skips or stash:
        raise UnsupportedLayer("plan left skip or stash entries unconsumed")
    p.norm("out_norm", ch, (r0, r0))
    p.conv("conv_out", ch, spec.in_channels, 3, (r0, r0))
    return p


def _discriminator_plan(spec: DiscriminatorSpec) -> _Plan:
    p = _Plan()
    r = spec.resolution
    p.alloc((2 * spec.in_channels, r, r))
    p.dense("t_embed.0", spec.base_channels, spec.t_embed_dim)
    p.dense("t_embed.1", spec.t_embed_dim, spec.t_embed_dim)
    ch = spec.channels[0]
    p.conv("stem", 2 * spec.in_channels, ch, 3, (r, r))
    for i, ci in enumerate(spec.channels):
        p.conv(f"blocks.{i}.conv1", ch, ci, 3, (r, r))
        p.dense(f"blocks.{i}.t_proj", spec.t_embed_dim, ci)
        p.conv(f"blocks.{i}.conv2", ci, ci, 3, (r, r))
        p.pool(f"blocks.{i}.pool", ci, (r, r))
        p.conv(f"blocks.{i}.skip", ch, ci, 1, (r, r), bias=False)
        p.pool(f"blocks.{i}.skip_pool", ci, (r, r))
        ch, r = ci, r // 2
    p.dense("head", ch, 1)
    return p


def count_costs(spec, input_shape: tuple[int, int, int] | None = None) -> CostReport:
    """Cost report for a generator or discriminator spec at batch 1.

    ``input_shape`` (C, H, W), when given, re-targets the spec's resolution
    and must agree with its channel count.
    """
    if isinstance(spec, GeneratorSpec):
        if input_shape is not None:
            if input_shape[0] != spec.in_channels or input_shape[1] != input_shape[2]:
                raise UnsupportedLayer(f"input {input_shape} does not fit a {spec.in_channels}-channel square input")
            res = input_shape[1] * (2 if spec.wavelet_input else 1)
            spec = replace(spec, resolution=res)
        plan = _generator_plan(spec)
    elif isinstance(spec, DiscriminatorSpec):
        if input_shape is not None:
            spec = replace(spec, in_channels=input_shape[0], resolution=input_shape[1])
        plan = _discriminator_plan(spec)
    else:
        raise UnsupportedLayer(f"cannot account for {type(spec).__name__}")
    rows = plan.rows
    return CostReport(sum(r.params for r in rows), sum(r.flops for r in rows), plan.peak, rows)


def flops_ratio(pixel: GeneratorSpec, wavelet: GeneratorSpec) -> float:
    """pixel-space FLOPs / wavelet-space FLOPs."""
    return count_costs(pixel).flops / count_costs(wavelet).flops


def live_costs(module, *inputs) -> tuple[int, int]:
    """(parameter count, counted forward FLOPs) of an instantiated network at the given inputs."""
    from . import tensor as T
    with T.no_grad(), T.count_flops() as counter:
        module(*inputs)
    return module.num_parameters(), counter.total
