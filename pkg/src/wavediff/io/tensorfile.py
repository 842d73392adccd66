"""Packed-subband tensor files (``.wdt``).

Same container as checkpoints with magic ``WDTF``; the text blob is JSON
metadata and the single tensor ``y`` holds ``[B, 4C, h, w]`` subbands in
the frozen ``[ll, lh, hl, hh]`` channel-block order.
"""

from __future__ import annotations

import json

import numpy as np

from .container import FormatError, decode, encode

MAGIC = b"WDTF"
VERSION = 1
ORDER = ["ll", "lh", "hl", "hh"]


def save_wdt(path: str, y: np.ndarray, meta: dict | None = None) -> None:
    """Write packed subbands; ``meta["levels"]`` (default 1) gives the decomposition depth."""
    y = np.asarray(y, dtype=np.float64)
    meta = dict(meta or {})
    levels = int(meta.setdefault("levels", 1))
    if y.ndim != 4 or levels < 1 or y.shape[1] % 4 ** levels:
        raise ValueError(f"packed {levels}-level subbands need shape [B, 4**levels * C, h, w], got {y.shape}")
    info = {"order": ORDER, "image_channels": y.shape[1] // 4 ** levels}
    info.update(meta)
    with open(path, "wb") as fh:
        fh.write(encode(MAGIC, VERSION, json.dumps(info, sort_keys=True), {"y": y}))


def load_wdt(path: str) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    version, blob, tensors = decode(data, MAGIC, path)
    if version != VERSION or "y" not in tensors:
        raise FormatError(f"{path}: not a version-{VERSION} subband file")
    meta = json.loads(blob)
    if meta.get("order") != ORDER:
        raise FormatError(f"{path}: unexpected subband order {meta.get('order')}")
    return tensors["y"].astype(np.float64), meta
