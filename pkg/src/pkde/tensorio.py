"""Binary tensor files and PGM previews.

Layout of a tensor file::

    b"PKTENS01" | u32 rank | u32 dims[rank] | f32 payload (row-major)

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PKTENS01"


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise TensorFormatError("bad magic, not a PKTENS01 file")
    (rank,) = struct.unpack_from("<I", buf, 8)
    off = 12 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise TensorFormatError(
            f"payload size mismatch: expected {4 * count} bytes, got {len(buf) - off}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return data.reshape(dims).astype(np.float32)


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_pgm(path, image) -> None:
    """Write a [0, 1] image as 8-bit binary PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise TensorFormatError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
