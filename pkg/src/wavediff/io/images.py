"""Binary PGM (P5) / PPM (P6) reading and writing.

Pixel values map to ``[-1, 1]`` as ``v / 127.5 - 1``.  Saving clamps to
``[-1, 1]`` and quantizes with ``floor(127.5 * (v + 1) + 0.5)`` (round half
up), so 0.0 becomes 128.
"""

from __future__ import annotations

import json
import os
import re

import numpy as np


class ImageFormatError(ValueError):
    pass


def _header_tokens(data: bytes, path: str):
    """Yield (token, offset_after) for the four header fields, skipping comments."""
    toks = []
    i = 0
    n = len(data)
    while len(toks) < 4:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError(f"{path}: truncated header at offset {start}")
        toks.append((data[start:i], start))
    if i >= n or not data[i:i + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after header at offset {i}")
    return toks, i + 1


def read_pnm(path: str) -> np.ndarray:
    """Return uint8 pixels, ``[H, W]`` for P5 and ``[H, W, 3]`` for P6."""
    with open(path, "rb") as fh:
        data = fh.read()
    toks, off = _header_tokens(data, path)
    magic = toks[0][0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r} at offset 0 (need P5 or P6)")
    try:
        w, h, maxval = (int(t) for t, _ in toks[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header field near offset {toks[1][1]}") from None
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: bad size {w}x{h} at offset {toks[1][1]}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} at offset {toks[3][1]} unsupported (need 255)")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    if len(data) - off < need:
        raise ImageFormatError(f"{path}: pixel data truncated at offset {len(data)}, need {need} bytes from {off}")
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    return px.reshape((h, w) if c == 1 else (h, w, 3)).copy()


def write_pnm(path: str, pixels: np.ndarray) -> None:
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise TypeError("pixels must be uint8")
    if px.ndim == 2:
        magic, (h, w) = b"P5", px.shape
    elif px.ndim == 3 and px.shape[2] == 3:
        magic, (h, w) = b"P6", px.shape[:2]
    else:
        raise ValueError(f"need [H, W] or [H, W, 3] pixels, got {px.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(px).tobytes())


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 ``[H, W(, 3)]`` -> float ``[C, H, W]`` in [-1, 1]."""
    x = pixels.astype(np.float64) / 127.5 - 1.0
    return x[None] if x.ndim == 2 else x.transpose(2, 0, 1)


def quantize(x: np.ndarray) -> np.ndarray:
    """float ``[C, H, W]`` -> uint8 ``[H, W(, 3)]`` with clamping and half-up rounding."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    q = np.floor(127.5 * (x + 1.0) + 0.5).astype(np.uint8)
    if q.shape[0] == 1:
        return q[0]
    if q.shape[0] == 3:
        return q.transpose(1, 2, 0)
    raise ValueError(f"images need 1 or 3 channels, got {q.shape[0]}")


def _natural_key(name: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", name)]


def list_images(directory: str) -> list[str]:
    """PGM/PPM names in natural order (``sample_2`` before ``sample_10``)."""
    return sorted((f for f in os.listdir(directory) if f.lower().endswith((".pgm", ".ppm"))), key=_natural_key)


def load_images(directory: str) -> np.ndarray:
    """All PGM/PPM files of ``directory`` (sorted by name) as ``[N, C, H, W]`` in [-1, 1]."""
    names = list_images(directory)
    if not names:
        raise ImageFormatError(f"{directory}: no .pgm/.ppm files")
    out = []
    for n in names:
        x = to_unit(read_pnm(os.path.join(directory, n)))
        if out and x.shape != out[0].shape:
            raise ImageFormatError(f"{os.path.join(directory, n)}: size {x.shape} differs from {out[0].shape}")
        out.append(x)
    return np.stack(out)


def save_images(batch: np.ndarray, directory: str, manifest: dict | None = None) -> list[str]:
    """Write ``sample_{i}.pgm`` / ``.ppm`` plus ``manifest.json``; return the file names."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ValueError(f"need [N, C, H, W], got {batch.shape}")
    os.makedirs(directory, exist_ok=True)
    ext = "pgm" if batch.shape[1] == 1 else "ppm"
    names = []
    for i, img in enumerate(batch):
        name = f"sample_{i}.{ext}"
        write_pnm(os.path.join(directory, name), quantize(img))
        names.append(name)
    info = {"count": len(names), "files": names, "channels": int(batch.shape[1]),
            "height": int(batch.shape[2]), "width": int(batch.shape[3])}
    info.update(manifest or {})
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return names
