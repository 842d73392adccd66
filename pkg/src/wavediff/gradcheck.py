"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NondeterminismError(RuntimeError):
    """Two evaluations of the checked function at the same point disagreed."""


@dataclass
class GradcheckReport:
    tolerance: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    coords_checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tolerance:.1e}"]
        for name, err in self.max_rel_err.items():
            lines.append(f"  {name}: {err:.3e} over {self.coords_checked[name]} coords")
        return "\n".join(lines)


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
              tolerance: float = 1e-4, h: float = 1e-5, n_coords: int | None = 100,
              rng: np.random.Generator | None = None, floor: float = 1e-5) -> GradcheckReport:
    """Compare reverse-mode gradients of the scalar ``f()`` with central differences.

    ``params`` are perturbed in place (and restored).  At most ``n_coords``
    random coordinates per parameter are probed; ``None`` probes all.  The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``
    so that coordinates whose true gradient is ~0 are judged absolutely.
    The floor is raised to the round-off level of the difference quotient,
    ``1e4 * eps * max(1, |f|) / h``, below which central differences carry
    no information.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"p{i}", p) for i, p in enumerate(params)]
    rng = rng or np.random.default_rng(0)

    def value() -> float:
        with T.no_grad():
            return f().item()

    v0 = value()
    if value() != v0:
        raise NondeterminismError("f returned different values on repeated evaluation")
    floor = max(floor, 1e4 * np.finfo(np.float64).eps * max(1.0, abs(v0)) / h)
    out = f()
    analytic = T.grad(out, [p for _, p in named])
    report = GradcheckReport(tolerance)
    for (name, p), g in zip(named, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if n_coords is not None and flat.size > n_coords:
            idx = rng.choice(flat.size, n_coords, replace=False)
        worst = 0.0
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(gflat[i], num, floor))
        report.max_rel_err[name] = worst
        report.coords_checked[name] = len(idx)
    return report


def check_module(module, loss_fn: Callable[[], Tensor], tolerance: float = 1e-4,
                 n_coords: int | None = 20, **kw) -> GradcheckReport:
    """Gradcheck every parameter of ``module`` under ``loss_fn``."""
    return gradcheck(loss_fn, dict(module.named_parameters()), tolerance, n_coords=n_coords, **kw)


# -- registered cases ------------------------------------------------------------

def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_(T.mul(out, Tensor(w)))


def _case(rng: np.random.Generator, build: Callable[..., Tensor], *shapes, positive=False):
    """Leaves of the given shapes and a scalar probe ``sum(build(*leaves) * W)``."""
    leaves = []
    for i, s in enumerate(shapes):
        data = rng.normal(size=s)
        if positive:
            data = np.abs(data) + 0.5
        leaves.append(Tensor(data, requires_grad=True, name=f"in{i}"))
    probe = {}

    def f():
        out = build(*leaves)
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return _weighted_sum(out, probe["w"])

    f()
    return f, leaves


def _randomize(module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Move every parameter off its initial value so no path is trivially zero."""
    for p in module.parameters():
        p.data = p.data + scale * rng.normal(size=p.shape) / np.sqrt(max(1, p.size // max(1, p.shape[0])))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor], float]]:
    """Every differentiable op with a randomized probe: name -> (f, leaves, tolerance)."""
    from . import wavelet as W
    rng = np.random.default_rng(seed)
    x4 = (2, 3, 6, 6)
    cases: dict[str, tuple] = {}

    def add(name, build, *shapes, tol=1e-4, **kw):
        f, leaves = _case(rng, build, *shapes, **kw)
        cases[name] = (f, leaves, tol)

    add("add", T.add, x4, (2, 3, 1, 1))
    add("sub", T.sub, x4, x4)
    add("mul", T.mul, x4, (1, 3, 1, 1))
    add("scale", lambda a: T.scale(a, -1.7), x4)
    add("add_scalar", lambda a: T.add_scalar(a, 0.3), x4)
    add("neg", T.neg, x4)
    add("silu", T.silu, x4)
    add("leaky_relu", T.leaky_relu, x4)
    add("tanh", T.tanh, x4)
    add("softplus", T.softplus, x4)
    add("abs", T.abs_, x4)
    add("square", T.square, x4)
    add("sum", lambda a: T.sum_(a, axis=(2, 3)), x4)
    add("mean", lambda a: T.mean(a, axis=1, keepdims=True), x4)
    add("reshape", lambda a: T.reshape(a, (6, 36)), x4)
    add("transpose", lambda a: T.transpose(a, (0, 2, 3, 1)), x4)
    add("getitem", lambda a: a[:, 1:, ::2], x4)
    add("concat", lambda a, b: T.concat([a, b], axis=1), x4, (2, 2, 6, 6))
    add("split", lambda a: T.mul(*T.split(a, 2, axis=1)), (2, 4, 3, 3))
    add("matmul", T.matmul, (2, 4, 3), (2, 3, 5))
    add("dense", T.dense, (4, 5), (3, 5), (3,))
    add("softmax", lambda a: T.softmax(a, axis=-1), (3, 7))
    add("conv2d", lambda a, w, b: T.conv2d(a, w, b, 1, 1), x4, (4, 3, 3, 3), (4,))
    add("conv2d_stride2", lambda a, w: T.conv2d(a, w, None, 2, 1), x4, (4, 3, 3, 3))
    add("conv2d_reflect", lambda a, w: T.conv2d(a, w, None, 1, 1, "reflect"), x4, (2, 3, 3, 3))
    add("conv2d_1x1", lambda a, w: T.conv2d(a, w), x4, (5, 3, 1, 1))
    add("avg_pool2", T.avg_pool2, x4)
    add("upsample_nearest2", T.upsample_nearest2, (2, 3, 3, 3))
    add("group_norm", lambda a, g, b: T.group_norm(a, 3, g, b), (2, 6, 4, 4), (6,), (6,))
    add("pixel_norm", T.pixel_norm, (3, 8))
    add("self_attention",
        lambda a, wq, wk, wv, wo: T.self_attention(a, wq, wk, wv, wo, heads=2, norm_groups=2),
        (2, 4, 3, 3), (4, 4, 1, 1), (4, 4, 1, 1), (4, 4, 1, 1), (4, 4, 1, 1))
    add("dwt", W.dwt_packed, x4, tol=1e-6)
    add("idwt", W.idwt_packed, (2, 8, 3, 3), tol=1e-6)
    add("multilevel_dwt", lambda a: W.multilevel_dwt(a, 2), (1, 2, 8, 8), tol=1e-6)
    return cases


def network_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor], float]]:
    """Wavelet layer, frequency blocks and the full tiny generator / discriminator."""
    from .networks import (PRESETS, Discriminator, FreqBottleneck, FreqDownBlock, FreqUpBlock, Generator,
                           discriminator_spec_for)
    from .rng import RngStream
    from .wavelet import WaveletDownsample
    rng = np.random.default_rng(seed)
    init = RngStream(seed, "gradcheck")
    spec = PRESETS["tiny"].spec
    B = 2
    cases: dict[str, tuple] = {}

    def probe(shape):
        return rng.normal(size=shape)

    wd = WaveletDownsample(3, 5, 1, init)
    xw = Tensor(rng.normal(size=(B, 3, 8, 8)))
    pw = probe((B, 5, 4, 4))
    cases["wavelet_downsample"] = (lambda: _weighted_sum(wd(xw), pw), dict(wd.named_parameters()), 1e-4)

    temb = Tensor(rng.normal(size=(B, 8)))
    zemb = Tensor(rng.normal(size=(B, 6)))
    xf = Tensor(rng.normal(size=(B, 4, 8, 8)))
    down = FreqDownBlock(4, 8, 6, init)
    _randomize(down, rng)
    pd_ll, pd_hi = probe((B, 4, 4, 4)), probe((B, 12, 4, 4))

    def f_down():
        ll, hi = down(xf, temb, zemb)
        return T.add(_weighted_sum(ll, pd_ll), _weighted_sum(hi, pd_hi))

    cases["freq_down_block"] = (f_down, dict(down.named_parameters()), 1e-4)

    up = FreqUpBlock(4, 4, 4, 4, 8, 6, init)
    _randomize(up, rng)
    xs, hs, ss = (Tensor(rng.normal(size=s)) for s in ((B, 4, 4, 4), (B, 12, 4, 4), (B, 4, 8, 8)))
    pu = probe((B, 4, 8, 8))
    cases["freq_up_block"] = (lambda: _weighted_sum(up(xs, hs, ss, temb, zemb), pu),
                              dict(up.named_parameters()), 1e-4)

    mid = FreqBottleneck(4, 8, 6, init)
    _randomize(mid, rng)
    pm = probe((B, 4, 8, 8))
    cases["freq_bottleneck_block"] = (lambda: _weighted_sum(mid(xf, temb, zemb), pm),
                                      dict(mid.named_parameters()), 1e-4)

    G = Generator(spec, init)
    _randomize(G, rng)
    y = Tensor(rng.normal(size=(B,) + spec.input_shape()))
    z = Tensor(rng.normal(size=(B, spec.latent_dim)))
    t = np.array([1, 2])
    pg = probe((B,) + spec.input_shape())
    cases["generator"] = (lambda: _weighted_sum(G(y, z, t), pg), dict(G.named_parameters()), 1e-4)

    D = Discriminator(discriminator_spec_for(spec), init)
    _randomize(D, rng)
    y2 = Tensor(rng.normal(size=(B,) + spec.input_shape()))
    pdisc = probe((B,))
    cases["discriminator"] = (lambda: _weighted_sum(D(y2, y, t), pdisc), dict(D.named_parameters()), 1e-4)
    return cases


def run_all(seed: int = 0, coords_per_param: int = 3, only: str | None = None) -> dict[str, GradcheckReport]:
    """Gradcheck every registered op (all coordinates) and network (a few per parameter tensor)."""
    reports = {}
    for name, (f, leaves, tol) in op_cases(seed).items():
        if only in (None, name):
            reports[name] = gradcheck(f, {p.name: p for p in leaves}, tol, n_coords=None)
    if only is None or only in ("wavelet_downsample", "freq_down_block", "freq_up_block",
                                "freq_bottleneck_block", "generator", "discriminator"):
        for name, (f, params, tol) in network_cases(seed).items():
            if only in (None, name):
                reports[name] = gradcheck(f, params, tol, n_coords=coords_per_param,
                                          rng=np.random.default_rng(seed))
    if only is not None and not reports:
        raise KeyError(f"no gradcheck case named {only!r}")
    return reports
