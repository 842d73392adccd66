"""Checkpoint files (``ckpt_{step}.wdif``): magic ``WDIF``, config echo and tensor table."""

from __future__ import annotations

import os

import numpy as np

from .container import FormatError, decode, encode

MAGIC = b"WDIF"
VERSION = 1


def save_checkpoint(path: str, config_text: str, tensors: "dict[str, np.ndarray]",
                    store_f32: bool = False) -> None:
    """Write atomically (temp file + rename) so a crash never leaves a torn file."""
    data = encode(MAGIC, VERSION, config_text, tensors, store_f32)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> tuple[str, "dict[str, np.ndarray]"]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    version, text, tensors = decode(data, MAGIC, path)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    return text, dict(tensors)
