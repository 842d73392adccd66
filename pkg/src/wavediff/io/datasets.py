"""Synthetic image corpora and directory-backed datasets.

Every synthetic corpus is a pure function of its spec: pixels are drawn
from the ``dataset/<kind>`` substream of ``seed`` and quantized to 8 bits,
so the in-memory images equal what a PGM/PPM round trip would give.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from ..rng import RngStream
from .images import load_images, quantize, save_images, to_unit

KINDS = ("two-mode-gaussian-images", "shapes", "checkerboard")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    kind: str = "two-mode-gaussian-images"
    resolution: int = 32
    channels: int = 3
    count: int = 1024
    seed: int = 0
    noise: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {KINDS}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.resolution < 4 or self.count < 1 or self.noise < 0:
            raise ValueError("resolution >= 4, count >= 1 and noise >= 0 required")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [-1, 1]
    labels: np.ndarray | None = None  # [N] mode / class ids

    def __len__(self) -> int:
        return self.images.shape[0]

    def prototypes(self) -> np.ndarray:
        """Per-label mean image, ``[K, C, H, W]``."""
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return np.stack([self.images[self.labels == k].mean(axis=0) for k in np.unique(self.labels)])


# mode colours for RGB corpora: warm blob vs cool blob
_COLORS = np.array([[0.9, 0.1, -0.5], [-0.5, 0.1, 0.9]])


def _two_mode(spec: SyntheticDatasetSpec, rng: RngStream):
    r, c, n = spec.resolution, spec.channels, spec.count
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64)
    tint = np.linspace(-0.2, 0.2, c) if c > 1 else np.zeros(1)
    background = -0.5 + 0.3 * (xx / (r - 1)) + tint[:, None, None]
    centers = np.array([[r / 3, r / 3], [2 * r / 3, 2 * r / 3]])
    sigma = r / 8
    labels = rng.integers(0, 2, n)
    jitter = rng.uniform((n, 2)) * 2.0 - 1.0
    amp = 0.85 + 0.3 * rng.uniform(n)
    noise = rng.normal((n, c, r, r)) * spec.noise
    out = np.empty((n, c, r, r))
    for i in range(n):
        cy, cx = centers[labels[i]] + jitter[i]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        color = _COLORS[labels[i]] if c == 3 else np.array([1.0])
        out[i] = background + amp[i] * color[:, None, None] * bump + noise[i]
    return out, labels


def _shapes(spec: SyntheticDatasetSpec, rng: RngStream):
    r, c, n = spec.resolution, spec.channels, spec.count
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64) + 0.5
    labels = rng.integers(0, 2, n)  # 0 circle, 1 square
    size = r / 8 + rng.uniform(n) * r / 8
    pos = rng.uniform((n, 2))
    color = 0.2 + 0.8 * rng.uniform((n, c))
    noise = rng.normal((n, c, r, r)) * spec.noise
    out = np.full((n, c, r, r), -1.0)
    for i in range(n):
        cy, cx = size[i] + pos[i] * (r - 2 * size[i])
        if labels[i] == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size[i] ** 2
        else:
            mask = (np.abs(yy - cy) <= size[i]) & (np.abs(xx - cx) <= size[i])
        out[i][:, mask] = color[i][:, None]
    return out + noise, labels


def _checkerboard(spec: SyntheticDatasetSpec, rng: RngStream):
    r, c, n = spec.resolution, spec.channels, spec.count
    cell = max(1, r // 4)
    yy, xx = np.mgrid[0:r, 0:r]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    labels = rng.integers(0, 2, n)  # phase
    noise = rng.normal((n, c, r, r)) * spec.noise
    out = np.empty((n, c, r, r))
    for i in range(n):
        b = board if labels[i] == 0 else 1.0 - board
        out[i] = (1.6 * b - 0.8)[None] + noise[i]
    return out, labels


_GENERATORS = {"two-mode-gaussian-images": _two_mode, "shapes": _shapes, "checkerboard": _checkerboard}


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    raw, labels = _GENERATORS[spec.kind](spec, RngStream(spec.seed, "dataset/" + spec.kind))
    images = np.stack([to_unit(quantize(x)) for x in raw])
    return Dataset(images, labels.astype(np.int64))


def write_dataset(spec: SyntheticDatasetSpec, directory: str) -> list[str]:
    """Write the corpus as PGM/PPM files plus ``labels.json``."""
    ds = generate(spec)
    names = save_images(ds.images, directory, {"dataset": asdict(spec)})
    with open(os.path.join(directory, "labels.json"), "w", encoding="utf-8") as fh:
        json.dump({"files": names, "labels": ds.labels.tolist()}, fh)
        fh.write("\n")
    return names


def load_dataset(directory: str) -> Dataset:
    """Images of ``directory``; labels are attached when ``labels.json`` is present."""
    images = load_images(directory)
    labels = None
    path = os.path.join(directory, "labels.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            info = json.load(fh)
        from .images import list_images
        by_name = dict(zip(info["files"], info["labels"]))
        labels = np.array([by_name[n] for n in list_images(directory)], dtype=np.int64)
    return Dataset(images, labels)
