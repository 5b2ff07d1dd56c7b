"""Netpbm (PGM/PPM) reading and writing, with optional PNG through Pillow.

Images live in memory as float arrays in ``[0, 1]``: ``H x W`` for grayscale
and ``H x W x 3`` for colour. Files hold 8-bit samples.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"^(P[2356])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_netpbm(img: np.ndarray) -> bytes:
    """PGM (P5) for 2-d input, PPM (P6) for ``H x W x 3``."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def decode_netpbm(blob: bytes) -> np.ndarray:
    """Decode P2/P3/P5/P6 into a uint8 array."""
    m = _HEADER.match(blob)
    if m is None:
        raise ValueError("not a netpbm image")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    body = blob[m.end() :]
    if magic in (b"P5", b"P6"):
        arr = np.frombuffer(body, dtype=np.uint8, count=w * h * channels)
    else:
        arr = np.array(body.split()[: w * h * channels], dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(img if img.dtype == np.uint8 else to_uint8(img)).save(path)
    else:
        path.write_bytes(encode_netpbm(img))


def read_image(path: str | Path) -> np.ndarray:
    """Float image in ``[0, 1]`` from a PGM, PPM or PNG file."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        raw = decode_netpbm(path.read_bytes())
    else:
        from PIL import Image

        with Image.open(path) as im:
            raw = np.asarray(im.convert("L" if im.mode in ("L", "1", "LA", "I;16") else "RGB"))
    return raw.astype(np.float32) / 255.0


IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png")
