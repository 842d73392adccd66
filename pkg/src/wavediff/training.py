"""Adversarial few-step diffusion training in wavelet space.

One iteration draws ``t ~ U{1..T}``, noises the packed subbands ``y0`` to
``y_t`` and forms the real pair ``(y_{t-1}, y_t)`` from the Gaussian
posterior.  The discriminator step scores it against a fake pair built from
the (detached) generator estimate; the generator step uses a fresh latent
and minimises the non-saturating adversarial loss plus ``lambda`` times the
mean absolute error between its clean-subband estimate and ``y0``.
"""

from __future__ import annotations

import contextlib
import csv
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .diffusion import (DiffusionSchedule, NonFiniteError, SamplerConfig, q_posterior_sample, q_sample,
                        sample)
from .io.checkpoint import load_checkpoint, save_checkpoint
from .io.config import RunConfig
from .io.datasets import Dataset
from .metrics import mode_coverage, moment_error
from .networks import Discriminator, Generator
from .rng import RngStreams
from .tensor import Tensor
from .wavelet import dwt_packed

METRICS_HEADER = ["step", "epoch", "L_adv_D", "L_adv_G", "L_rec", "r1", "mode_coverage", "moment_err"]
LOSSES_HEADER = ["step", "epoch", "L_adv_D", "L_adv_G", "L_rec", "L_G_total", "r1"]


@dataclass
class LossReport:
    L_adv_D: float
    L_adv_G: float
    L_rec: float
    L_G_total: float
    r1_penalty: float = 0.0


@dataclass
class TrainHyper:
    lr_G: float = 1.6e-4
    lr_D: float = 1.25e-4
    beta1: float = 0.5
    beta2: float = 0.9
    lambda_rec: float = 1.0
    ema_decay: float = 0.999
    r1_gamma: float = 0.05
    r1_every: int = 4
    reuse_draws: bool = True

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "TrainHyper":
        return cls(**{f: cfg["train." + f] for f in cls.__dataclass_fields__})


# -- optimiser and EMA ----------------------------------------------------------

def adam_update(params: list[np.ndarray], grads: list[np.ndarray], moments: dict, lr: float,
                beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam step.

    ``moments`` holds ``m`` and ``v`` (lists congruent with ``params``) and
    the step count ``t``; it is updated in place.  Returns new parameter
    arrays (the inputs are not modified).
    """
    if len(params) != len(grads):
        raise T.ShapeError("params and grads differ in length")
    moments.setdefault("t", 0)
    moments.setdefault("m", [np.zeros_like(p) for p in params])
    moments.setdefault("v", [np.zeros_like(p) for p in params])
    moments["t"] += 1
    t = moments["t"]
    bc1, bc2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise T.ShapeError(f"param {i}: grad shape {g.shape} != {p.shape}")
        m = moments["m"][i] = beta1 * moments["m"][i] + (1.0 - beta1) * g
        v = moments["v"][i] = beta2 * moments["v"][i] + (1.0 - beta2) * (g * g)
        out.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
    return out


class Adam:
    """Adam over a fixed, ordered list of parameters (updated in place)."""

    def __init__(self, params: list[T.Tensor], lr: float, beta1: float = 0.5, beta2: float = 0.9,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.moments = {"t": 0, "m": [np.zeros(p.shape) for p in self.params],
                        "v": [np.zeros(p.shape) for p in self.params]}

    def step(self, grads: list[np.ndarray]) -> None:
        new = adam_update([p.data for p in self.params], grads, self.moments, self.lr,
                          self.beta1, self.beta2, self.eps)
        for p, n in zip(self.params, new):
            p.data[...] = n


def ema_update(shadow: list[np.ndarray], params: list[np.ndarray], decay: float,
               inplace: bool = False) -> list[np.ndarray]:
    """``shadow' = decay * shadow + (1 - decay) * params``."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    out = []
    for s, p in zip(shadow, params):
        if s.shape != p.shape:
            raise T.ShapeError(f"EMA shadow {s.shape} vs param {p.shape}")
        new = decay * s + (1.0 - decay) * p
        if inplace:
            s[...] = new
            new = s
        out.append(new)
    return out


# -- losses ---------------------------------------------------------------------

def d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """``E softplus(-D(real)) + E softplus(D(fake))`` = -log D(real) - log(1 - D(fake))."""
    return T.add(T.mean(T.softplus(T.neg(d_real))), T.mean(T.softplus(d_fake)))


def g_adv_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating ``-log D(fake)``."""
    return T.mean(T.softplus(T.neg(d_fake)))


def rec_loss(y0_pred: Tensor, y0: np.ndarray) -> Tensor:
    """Mean absolute error over all subband elements."""
    return T.mean(T.abs_(T.sub(y0_pred, Tensor(y0))))


@contextlib.contextmanager
def frozen(module):
    """Stop tracking gradients for ``module``'s parameters inside the block."""
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def r1_penalty(D: Discriminator, y_prev, y_t, t, gamma: float = 1.0) -> float:
    """``(gamma / 2) * mean_b || d D_b / d y_prev_b ||^2`` at the real pair."""
    x = Tensor(np.asarray(y_prev.data if isinstance(y_prev, Tensor) else y_prev), requires_grad=True)
    (g,) = T.grad(T.sum_(D(x, y_t, t)), [x])
    return 0.5 * gamma * float((g * g).sum()) / x.shape[0]


def r1_penalty_and_grads(D: Discriminator, y_prev, y_t, t, gamma: float,
                         rel_step: float = 1e-6) -> tuple[float, list[np.ndarray]]:
    """R1 value and its gradient w.r.t. D's parameters.

    With ``S = sum_b D_b`` and ``g = dS/dy_prev`` the penalty is
    ``gamma / (2B) * |g|^2`` and its parameter gradient is
    ``gamma / B * (d^2 S / d theta d y_prev) g``.  That mixed
    Hessian-vector product is taken as a central difference of parameter
    gradients along ``g``; the step is scaled so the probe perturbs
    ``y_prev`` by ``rel_step`` in RMS.  D is piecewise linear in ``y_prev``,
    so the difference is exact unless the probe crosses an activation kink;
    a small step keeps that unlikely.
    """
    y_prev = np.asarray(y_prev.data if isinstance(y_prev, Tensor) else y_prev)
    params = D.parameters()
    x = Tensor(y_prev, requires_grad=True)
    with frozen(D):
        (g,) = T.grad(T.sum_(D(x, y_t, t)), [x])
    B = y_prev.shape[0]
    value = 0.5 * gamma * float((g * g).sum()) / B
    gnorm = math.sqrt(float((g * g).mean()))
    if gnorm == 0.0 or gamma == 0.0:
        return value, [np.zeros(p.shape) for p in params]
    eps = rel_step / gnorm

    def param_grads(shift: float) -> list[np.ndarray]:
        return T.grad(T.sum_(D(Tensor(y_prev + shift * g), y_t, t)), params)

    plus, minus = param_grads(eps), param_grads(-eps)
    c = gamma / B / (2.0 * eps)
    return value, [c * (a - b) for a, b in zip(plus, minus)]


# -- state ------------------------------------------------------------------------

def to_subbands(x0: np.ndarray, wavelet_input: bool = True) -> np.ndarray:
    return dwt_packed(x0).data if wavelet_input else np.asarray(x0, dtype=np.float64)


@dataclass
class TrainState:
    G: Generator
    D: Discriminator
    opt_G: Adam
    opt_D: Adam
    ema: list[np.ndarray]
    streams: RngStreams
    step: int = 0
    epoch: int = 0
    perm: np.ndarray | None = None
    pos: int = 0
    last_r1: float = 0.0

    @classmethod
    def create(cls, g_spec, d_spec, hyper: TrainHyper, seed: int) -> "TrainState":
        streams = RngStreams(seed)
        G = Generator(g_spec, streams["init"])
        D = Discriminator(d_spec, streams["init"])
        opt_G = Adam(G.parameters(), hyper.lr_G, hyper.beta1, hyper.beta2)
        opt_D = Adam(D.parameters(), hyper.lr_D, hyper.beta1, hyper.beta2)
        ema = [p.data.copy() for p in G.parameters()]
        return cls(G, D, opt_G, opt_D, ema, streams)

    def ema_generator(self) -> Generator:
        """A generator whose parameters alias the EMA shadow arrays."""
        G = Generator(self.G.spec, None)
        for p, s in zip(G.parameters(), self.ema):
            p.data = s
        return G

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        names_G = [n for n, _ in self.G.named_parameters()]
        names_D = [n for n, _ in self.D.named_parameters()]
        for n, p in self.G.named_parameters():
            out["G/" + n] = p.data
        for n, p in self.D.named_parameters():
            out["D/" + n] = p.data
        for n, s in zip(names_G, self.ema):
            out["ema/" + n] = s
        for tag, opt, names in (("adam_G", self.opt_G, names_G), ("adam_D", self.opt_D, names_D)):
            out[f"{tag}/t"] = np.array(opt.moments["t"], dtype=np.int64)
            for n, m, v in zip(names, opt.moments["m"], opt.moments["v"]):
                out[f"{tag}/m/{n}"] = m
                out[f"{tag}/v/{n}"] = v
        out["state/step"] = np.array(self.step, dtype=np.int64)
        out["state/epoch"] = np.array(self.epoch, dtype=np.int64)
        out["state/pos"] = np.array(self.pos, dtype=np.int64)
        out["state/last_r1"] = np.array(self.last_r1, dtype=np.float64)
        out["state/perm"] = (np.asarray(self.perm, dtype=np.int64) if self.perm is not None
                             else np.zeros(0, dtype=np.int64))
        for sname, st in self.streams.get_state().items():
            for k, v in st.items():
                out[f"rng/{sname}/{k}"] = v
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        def sub(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        self.G.load_state_dict(sub("G/"))
        self.D.load_state_dict(sub("D/"))
        names_G = [n for n, _ in self.G.named_parameters()]
        ema = sub("ema/")
        self.ema = [np.array(ema[n], dtype=np.float64) for n in names_G]
        for tag, opt, module in (("adam_G", self.opt_G, self.G), ("adam_D", self.opt_D, self.D)):
            opt.params = module.parameters()
            names = [n for n, _ in module.named_parameters()]
            opt.moments = {"t": int(tensors[f"{tag}/t"]),
                           "m": [np.array(tensors[f"{tag}/m/{n}"], dtype=np.float64) for n in names],
                           "v": [np.array(tensors[f"{tag}/v/{n}"], dtype=np.float64) for n in names]}
        self.step = int(tensors["state/step"])
        self.epoch = int(tensors["state/epoch"])
        self.pos = int(tensors["state/pos"])
        self.last_r1 = float(tensors["state/last_r1"])
        perm = tensors["state/perm"]
        self.perm = perm.astype(np.int64) if perm.size else None
        states: dict[str, dict[str, np.ndarray]] = {}
        for k, v in sub("rng/").items():
            sname, field_ = k.rsplit("/", 1)
            states.setdefault(sname, {})[field_] = v
        self.streams.set_state(states)


# -- one iteration ----------------------------------------------------------------

def _check_finite(name: str, value: float, step: int, t: np.ndarray) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"step {step}: {name} became {value} (t={t.tolist()})")


def train_step(x0: np.ndarray, state: TrainState, schedule: DiffusionSchedule,
               hyper: TrainHyper) -> LossReport:
    """One discriminator update followed by one generator update (in place).

    Any non-finite value met along the way aborts with :class:`NonFiniteError`
    naming the step.
    """
    try:
        return _train_step(x0, state, schedule, hyper)
    except NonFiniteError:
        raise
    except FloatingPointError as e:
        raise NonFiniteError(f"step {state.step + 1}: {e}") from e


def _train_step(x0, state: TrainState, schedule: DiffusionSchedule, hyper: TrainHyper) -> LossReport:
    G, D = state.G, state.D
    noise, latent = state.streams["noise"], state.streams["latent"]
    B = x0.shape[0]
    if x0.shape[2] % 2 or x0.shape[3] % 2:
        raise T.ShapeError(f"batch spatial dims must be even, got {x0.shape}")
    y0 = to_subbands(x0, G.spec.wavelet_input)
    step = state.step + 1

    t = noise.integers(1, schedule.T + 1, B)
    y_t = q_sample(y0, t, noise.normal(y0.shape), schedule)
    real_prev = q_posterior_sample(y0, y_t, t, schedule, noise)

    # discriminator
    with T.no_grad():
        y0_fake = G(Tensor(y_t), Tensor(latent.normal((B, G.spec.latent_dim))), t).data
    fake_prev = q_posterior_sample(y0_fake, y_t, t, schedule, noise)
    loss_D = d_loss(D(real_prev, y_t, t), D(fake_prev, y_t, t))
    _check_finite("L_adv_D", loss_D.item(), step, t)
    grads_D = T.grad(loss_D, D.parameters())
    r1 = None
    if hyper.r1_gamma > 0 and step % hyper.r1_every == 0:
        r1, r1_grads = r1_penalty_and_grads(D, real_prev, y_t, t, hyper.r1_gamma)
        _check_finite("r1", r1, step, t)
        grads_D = [a + b for a, b in zip(grads_D, r1_grads)]
        state.last_r1 = r1
    state.opt_D.step(grads_D)

    # generator
    if not hyper.reuse_draws:
        t = noise.integers(1, schedule.T + 1, B)
        y_t = q_sample(y0, t, noise.normal(y0.shape), schedule)
    z = latent.normal((B, G.spec.latent_dim))
    with frozen(D):
        y0_pred = G(Tensor(y_t), Tensor(z), t)
        fake_prev = q_posterior_sample(y0_pred, y_t, t, schedule, noise)
        adv = g_adv_loss(D(fake_prev, y_t, t))
        rec = rec_loss(y0_pred, y0)
        loss_G = T.add(adv, T.scale(rec, hyper.lambda_rec))
    _check_finite("L_G_total", loss_G.item(), step, t)
    state.opt_G.step(T.grad(loss_G, G.parameters()))
    ema_update(state.ema, [p.data for p in G.parameters()], hyper.ema_decay, inplace=True)
    state.step = step
    return LossReport(loss_D.item(), adv.item(), rec.item(), loss_G.item(), r1 if r1 is not None else 0.0)


# -- evaluation and the outer loop --------------------------------------------------

def generate_samples(G: Generator, schedule: DiffusionSchedule, n: int, rng, batch: int = 64) -> np.ndarray:
    cfg = SamplerConfig(steps=schedule.T, latent_dim=G.spec.latent_dim)
    out = []
    for start in range(0, n, batch):
        b = min(batch, n - start)
        out.append(sample(G, schedule, cfg, rng, b, G.spec.input_shape()))
    return np.concatenate(out)


def evaluate(state: TrainState, schedule: DiffusionSchedule, dataset: Dataset, n: int,
             use_ema: bool = True) -> tuple[float, float, np.ndarray]:
    """(mode coverage, moment error, samples) for ``n`` samples at the current step.

    Sampling noise comes from the ``eval/<step>`` substream so evaluations
    never disturb the training streams.
    """
    G = state.ema_generator() if use_ema else state.G
    rng = state.streams["eval"].child(str(state.step))
    samples = generate_samples(G, schedule, n, rng)
    cov = mode_coverage(samples, dataset.prototypes()) if dataset.labels is not None else float("nan")
    return cov, moment_error(samples, dataset.images), samples


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _CsvLog:
    """Append-only CSV; on resume, rows past ``keep_through`` are dropped first."""

    def __init__(self, path: str, header: list[str], keep_through: int | None):
        self.path = path
        rows = []
        if keep_through is not None and os.path.exists(path):
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                if next(reader, None) == header:
                    rows = [r for r in reader if r and int(r[0]) <= keep_through]
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
        except OSError as e:
            raise OSError(f"cannot write {path}: {e}") from e

    def append(self, row: list) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(v) for v in row])


def checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, f"ckpt_{step}.wdif")


def build_state(cfg: RunConfig, seed: int) -> TrainState:
    spec = cfg.generator_spec()
    if not spec.wavelet_input:
        raise ValueError("training operates in wavelet space; model.wavelet_input must be true")
    return TrainState.create(spec, cfg.discriminator_spec(), TrainHyper.from_config(cfg), seed)


def load_state(path: str, seed: int | None = None) -> tuple[RunConfig, TrainState]:
    text, tensors = load_checkpoint(path)
    cfg = RunConfig.from_text(text, path)
    misc = tensors.get("rng/init/misc")
    stored_seed = int(misc[4]) if misc is not None else cfg.seed()
    state = build_state(cfg, stored_seed if seed is None else seed)
    state.load_tensors(tensors)
    return cfg, state


@dataclass
class FitResult:
    state: TrainState
    checkpoints: list[str] = field(default_factory=list)
    losses: list[LossReport] = field(default_factory=list)
    evals: int = 0
    seconds: float = 0.0


def fit(dataset: Dataset, cfg: RunConfig, out_dir: str, seed: int | None = None,
        resume: str | None = None, max_steps: int | None = None,
        log: Callable[[str], None] | None = None) -> FitResult:
    """Train, writing ``ckpt_{step}.wdif``, ``metrics.csv`` and ``losses.csv`` to ``out_dir``.

    The dataset is reshuffled every epoch from the ``data`` stream and the
    last partial batch is dropped.  Evaluation rows go to ``metrics.csv``
    (one per evaluation, including one at the end); per-step losses go to
    ``losses.csv``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    os.makedirs(out_dir, exist_ok=True)
    hyper = TrainHyper.from_config(cfg)
    if resume:
        cfg_ckpt, state = load_state(resume)
        if cfg_ckpt.text != cfg.text:
            raise ValueError(f"{resume}: stored config differs from the requested one")
    else:
        state = build_state(cfg, cfg.seed(seed))
    spec = state.G.spec
    if dataset.images.shape[1:] != (spec.image_channels, spec.resolution, spec.resolution):
        raise T.ShapeError(f"dataset images {dataset.images.shape[1:]} do not fit the model "
                           f"({spec.image_channels}x{spec.resolution}x{spec.resolution})")
    schedule = cfg.schedule()
    keep = state.step if resume else None
    metrics = _CsvLog(os.path.join(out_dir, "metrics.csv"), METRICS_HEADER, keep)
    losses = _CsvLog(os.path.join(out_dir, "losses.csv"), LOSSES_HEADER, keep)

    B = cfg["train.batch"]
    N = len(dataset)
    if N < B:
        raise ValueError(f"dataset has {N} images, fewer than one batch of {B}")
    per_epoch = N // B
    limit = max_steps if max_steps is not None else (cfg["train.max_steps"] or None)
    total = cfg["train.epochs"] * per_epoch
    if limit is not None:
        total = min(total, limit)
    ckpt_every, eval_every = cfg["train.ckpt_every"], cfg["train.eval_every"]
    result = FitResult(state)
    started = time.perf_counter()
    last: LossReport | None = None

    def do_eval():
        cov, merr, _ = evaluate(state, schedule, dataset, cfg["train.eval_samples"], cfg["train.sample_ema"])
        rep = last or LossReport(float("nan"), float("nan"), float("nan"), float("nan"))
        metrics.append([state.step, state.epoch, rep.L_adv_D, rep.L_adv_G, rep.L_rec, state.last_r1, cov, merr])
        result.evals += 1
        if log:
            log(f"eval step {state.step}: mode_coverage={cov:.3f} moment_err={merr:.4f}")

    def do_ckpt():
        path = checkpoint_path(out_dir, state.step)
        save_checkpoint(path, cfg.text, state.tensors())
        result.checkpoints.append(path)

    while state.step < total:
        if state.perm is None or state.pos + B > N:
            if state.perm is not None:
                state.epoch += 1
            state.perm = state.streams["data"].permutation(N)
            state.pos = 0
        idx = state.perm[state.pos:state.pos + B]
        state.pos += B
        last = train_step(dataset.images[idx], state, schedule, hyper)
        result.losses.append(last)
        losses.append([state.step, state.epoch, last.L_adv_D, last.L_adv_G, last.L_rec, last.L_G_total,
                       last.r1_penalty])
        if log and (state.step % 50 == 0 or state.step == 1):
            log(f"step {state.step}/{total} epoch {state.epoch}: D={last.L_adv_D:.4f} G={last.L_adv_G:.4f} "
                f"rec={last.L_rec:.4f} ({time.perf_counter() - started:.0f}s)")
        if eval_every and state.step % eval_every == 0 and state.step < total:
            do_eval()
        if ckpt_every and state.step % ckpt_every == 0 and state.step < total:
            do_ckpt()
    do_eval()
    do_ckpt()
    result.seconds = time.perf_counter() - started
    return result
