"""Sample-quality proxies: mode coverage and per-channel moment matching."""

from __future__ import annotations

import numpy as np


def assign_modes(samples: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Index of the nearest prototype (squared L2) for each sample."""
    s = samples.reshape(samples.shape[0], -1)
    p = prototypes.reshape(prototypes.shape[0], -1)
    d = (s * s).sum(1)[:, None] - 2.0 * s @ p.T + (p * p).sum(1)[None, :]
    return np.argmin(d, axis=1)


def mode_fractions(samples: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    k = prototypes.shape[0]
    return np.bincount(assign_modes(samples, prototypes), minlength=k) / samples.shape[0]


def mode_coverage(samples: np.ndarray, prototypes: np.ndarray) -> float:
    """Smallest fraction of samples assigned to any mode (1/K when balanced)."""
    return float(mode_fractions(samples, prototypes).min())


def channel_moments(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), images.var(axis=(0, 2, 3))


def moment_error(samples: np.ndarray, data: np.ndarray) -> float:
    """Largest absolute per-channel difference in mean or variance."""
    ms, vs = channel_moments(samples)
    md, vd = channel_moments(data)
    return float(max(np.abs(ms - md).max(), np.abs(vs - vd).max()))
