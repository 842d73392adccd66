"""Binary tensor container shared by checkpoints (``.wdif``) and tensor files (``.wdt``).

Layout, all integers little-endian::

    magic        4 bytes
    version      u32
    blob_len     u32, then blob_len bytes of UTF-8 text
    n_tensors    u32
    n_tensors x  name_len u16, name UTF-8, dtype u8, rank u8, dims u64[rank], payload
    crc32        u32 over every preceding byte (zlib polynomial)

Dtype tags: 0 = f32, 1 = f64, 2 = u64, 3 = i64.  Payloads are the
row-major little-endian element bytes.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict

import numpy as np

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u8"), 3: np.dtype("<i8")}
TAGS = {v.str: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    """Malformed, truncated or corrupted container."""


def _tag_for(arr: np.ndarray, store_f32: bool) -> int:
    kind = arr.dtype.kind
    if kind == "f":
        return 0 if (store_f32 or arr.dtype.itemsize == 4) else 1
    if kind == "u":
        return 2
    if kind in "ib":
        return 3
    raise FormatError(f"unsupported dtype {arr.dtype}")


def encode(magic: bytes, version: int, blob: str, tensors: "dict[str, np.ndarray]",
           store_f32: bool = False) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    text = blob.encode("utf-8")
    parts = [magic, struct.pack("<II", version, len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _tag_for(arr, store_f32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or arr.ndim > 255:
            raise FormatError(f"tensor {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(data: bytes, magic: bytes, where: str = "<bytes>") -> tuple[int, str, "OrderedDict[str, np.ndarray]"]:
    """Return (version, blob, tensors); raise FormatError with a byte offset on damage."""
    if len(data) < 4 + 8 + 4 + 4:
        raise FormatError(f"{where}: truncated ({len(data)} bytes)")
    if data[:4] != magic:
        raise FormatError(f"{where}: bad magic {data[:4]!r}, expected {magic!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError(f"{where}: CRC32 mismatch")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise FormatError(f"{where}: truncated at offset {off}")
        chunk = body[off:off + n]
        off += n
        return chunk

    version, blen = struct.unpack("<II", take(8))
    try:
        blob = take(blen).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{where}: config blob is not UTF-8") from None
    (count,) = struct.unpack("<I", take(4))
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        start = off
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in DTYPES:
            raise FormatError(f"{where}: unknown dtype tag {tag} for {name!r} at offset {start}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if off != len(body):
        raise FormatError(f"{where}: {len(body) - off} trailing bytes before CRC")
    return version, blob, tensors
