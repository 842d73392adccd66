"""Noise schedules, forward noising, the Gaussian posterior and the few-step sampler.

Arrays in :class:`DiffusionSchedule` are indexed by step ``t = 0..T`` with
``alpha_bar[0] = 1`` (the clean signal); ``beta[0]`` is unused and set to 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor
from .wavelet import idwt_packed

SCHEDULE_KINDS = ("geometric-alpha-bar", "linear-beta", "vp")


class NonFiniteError(FloatingPointError):
    """A sampled or trained quantity became NaN or infinite."""


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_mean_coef0: np.ndarray
    posterior_mean_coef_t: np.ndarray
    posterior_var: np.ndarray


@dataclass
class SamplerConfig:
    steps: int = 4
    latent_dim: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")


def _alpha_bars(T_: int, kind: str, params: dict) -> np.ndarray:
    """alpha_bar[1..T] for the requested schedule kind."""
    if kind == "geometric-alpha-bar":
        beta_min = params.get("beta_min", 0.1)
        final = params.get("alpha_bar_T", 1e-3)
        first = 1.0 - beta_min
        if not (0.0 < beta_min < 1.0 and 0.0 < final < 1.0):
            raise ValueError(f"beta_min and alpha_bar_T must lie in (0, 1); got {beta_min}, {final}")
        if T_ == 1:
            return np.array([final])
        if final >= first:
            raise ValueError(f"alpha_bar_T={final} must be below 1 - beta_min={first}")
        ab = np.exp(np.linspace(np.log(first), np.log(final), T_))
        ab[-1] = final
        return ab
    if kind == "linear-beta":
        beta = np.linspace(params.get("beta_start", 0.1), params.get("beta_end", 0.9), T_)
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("linear-beta schedule produced beta outside (0, 1)")
        return np.cumprod(1.0 - beta)
    if kind == "vp":
        # discretised variance-preserving SDE marginals on t in (eps, 1]
        b0, b1 = params.get("vp_beta_min", 0.1), params.get("vp_beta_max", 20.0)
        eps = params.get("vp_eps", 1e-3)
        s = np.arange(0, T_ + 1, dtype=np.float64) / T_ * (1.0 - eps) + eps
        log_mean = -0.25 * s ** 2 * (b1 - b0) - 0.5 * s * b0
        ab_full = np.exp(2.0 * log_mean)
        return ab_full[1:] / ab_full[0]
    raise ValueError(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")


def make_schedule(T_: int, kind: str = "geometric-alpha-bar", params: dict | None = None) -> DiffusionSchedule:
    """Build a schedule with ``T_`` steps.

    The default ``geometric-alpha-bar`` kind spaces ``alpha_bar[1..T]``
    log-uniformly from ``1 - beta_min`` to ``alpha_bar_T`` (0.1 and 1e-3 by
    default); betas follow as ``1 - alpha_bar[t] / alpha_bar[t-1]``.
    """
    if T_ < 1:
        raise ValueError(f"T must be >= 1, got {T_}")
    params = dict(params or {})
    ab = np.concatenate([[1.0], _alpha_bars(T_, kind, params)])
    beta = np.zeros(T_ + 1)
    beta[1:] = 1.0 - ab[1:] / ab[:-1]
    if np.any(beta[1:] <= 0.0) or np.any(beta[1:] >= 1.0) or not np.all(np.isfinite(beta)):
        raise ValueError(f"schedule {kind} with {params} yields beta outside (0, 1): {beta[1:]}")
    alpha = 1.0 - beta
    alpha[0] = 1.0
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    c0 = np.zeros(T_ + 1)
    ct = np.zeros(T_ + 1)
    var = np.zeros(T_ + 1)
    c0[1:] = np.sqrt(ab_prev[1:]) * beta[1:] / (1.0 - ab[1:])
    ct[1:] = np.sqrt(alpha[1:]) * (1.0 - ab_prev[1:]) / (1.0 - ab[1:])
    var[1:] = beta[1:] * (1.0 - ab_prev[1:]) / (1.0 - ab[1:])
    for arr in (beta, alpha, ab, c0, ct, var):
        arr.setflags(write=False)
    return DiffusionSchedule(T_, kind, beta, alpha, ab, c0, ct, var)


def _per_sample(values: np.ndarray, t, ndim: int) -> np.ndarray:
    t = np.asarray(t)
    v = values[t]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if t.ndim else v


def _check_t(t, schedule: DiffusionSchedule, low: int) -> np.ndarray:
    t = np.asarray(t)
    if t.dtype.kind not in "iu":
        raise TypeError("t must be an integer step index")
    if np.any(t < low) or np.any(t > schedule.T):
        raise ValueError(f"t={t} outside [{low}, {schedule.T}]")
    return t


def q_sample(y0, t, eps, schedule: DiffusionSchedule):
    """Draw from q(y_t | y0): ``sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps``.

    ``t`` is a scalar or per-sample integer array; ``t = 0`` returns ``y0``.
    Works on arrays and on tensors (differentiable in ``y0``).
    """
    t = _check_t(t, schedule, 0)
    nd = len(np.shape(y0.data if isinstance(y0, Tensor) else y0))
    a = _per_sample(np.sqrt(schedule.alpha_bar), t, nd)
    s = _per_sample(np.sqrt(1.0 - schedule.alpha_bar), t, nd)
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if isinstance(y0, Tensor):
        if eps.shape != y0.shape:
            raise T.ShapeError(f"eps shape {eps.shape} != y0 shape {y0.shape}")
        return T.add(T.mul(y0, Tensor(np.broadcast_to(a, y0.shape))), Tensor(s * eps))
    y0 = np.asarray(y0, dtype=np.float64)
    if eps.shape != y0.shape:
        raise T.ShapeError(f"eps shape {eps.shape} != y0 shape {y0.shape}")
    return a * y0 + s * eps


def posterior_mean_var(y0, y_t, t, schedule: DiffusionSchedule):
    t = _check_t(t, schedule, 1)
    nd = np.ndim(y_t.data if isinstance(y_t, Tensor) else y_t)
    c0 = _per_sample(schedule.posterior_mean_coef0, t, nd)
    ct = _per_sample(schedule.posterior_mean_coef_t, t, nd)
    var = _per_sample(schedule.posterior_var, t, nd)
    return c0, ct, var


def q_posterior_sample(y0, y_t, t, schedule: DiffusionSchedule, rng: RngStream | None = None,
                       noise: np.ndarray | None = None):
    """Draw y_{t-1} ~ q(y_{t-1} | y_t, y0) with the standard Gaussian posterior.

    Mean ``c0[t] * y0 + ct[t] * y_t`` and variance ``posterior_var[t]``; at
    ``t = 1`` the variance is zero and the draw equals ``y0``.  ``y0`` may be
    a tensor (the generator output) and the result is then differentiable in
    it.  Either ``rng`` or an explicit standard-normal ``noise`` is required.
    """
    t = np.asarray(t)
    if np.any(t == 0):
        raise ValueError("posterior is undefined at t=0")
    c0, ct, var = posterior_mean_var(y0, y_t, t, schedule)
    y_t_arr = y_t.data if isinstance(y_t, Tensor) else np.asarray(y_t, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("need rng or noise")
        noise = rng.normal(y_t_arr.shape)
    rest = ct * y_t_arr + np.sqrt(var) * noise
    if isinstance(y0, Tensor):
        return T.add(T.mul(y0, Tensor(np.broadcast_to(c0, y0.shape))), Tensor(rest))
    return c0 * np.asarray(y0, dtype=np.float64) + rest


def marginal_moments(y0: np.ndarray, t: int, schedule: DiffusionSchedule):
    """Closed-form mean and variance of q(y_t | y0)."""
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * y0, 1.0 - ab


class CountingGenerator:
    """Wraps a generator callable and counts its invocations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        return self.fn(*args, **kwargs)


def sample(generator, schedule: DiffusionSchedule, config: SamplerConfig, rng: RngStream,
           batch: int, shape: tuple[int, int, int], return_subbands: bool = False):
    """Few-step wavelet-space sampling.

    ``shape`` is the packed subband shape ``(4C, h, w)``; ``generator`` maps
    ``(y_t, z, t)`` to a clean-subband estimate.  Noise for ``y_T``, ``z``
    and the posterior all come from ``rng``.  Returns images
    ``[batch, C, 2h, 2w]`` (and the final subbands when requested).
    """
    if config.steps != schedule.T:
        raise ValueError(f"sampler steps {config.steps} != schedule T {schedule.T}")
    if shape[0] % 4:
        raise T.ShapeError(f"generator channels {shape[0]} must be 4x the image channels")
    y = rng.normal((batch,) + tuple(shape))
    with T.no_grad():
        for t in range(schedule.T, 0, -1):
            z = rng.normal((batch, config.latent_dim))
            tt = np.full(batch, t, dtype=np.int64)
            y0p = generator(Tensor(y), Tensor(z), tt)
            y0p = y0p.data if isinstance(y0p, Tensor) else np.asarray(y0p)
            if not np.all(np.isfinite(y0p)):
                raise NonFiniteError(f"generator produced non-finite output at t={t}")
            y = q_posterior_sample(y0p, y, tt, schedule, rng)
            if not np.all(np.isfinite(y)):
                raise NonFiniteError(f"posterior draw became non-finite at t={t}")
        images = idwt_packed(y).data
    return (images, y) if return_subbands else images
