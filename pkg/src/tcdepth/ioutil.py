"""Shared file formats: key=value text files, raw float32 raster files, PNGs.

Raster container layout: 4 magic bytes, u32 width, u32 height (little
endian), then the row-major little-endian float32 payload. Depth rasters use
magic ``DPTH`` (one channel), flow rasters use ``FLO2`` (interleaved u, v).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"DPTH"
FLOW_MAGIC = b"FLO2"


class FormatError(ValueError):
    """Raised when an on-disk artifact does not match its expected format."""


def write_kv(path, items: dict) -> None:
    """Write a flat key=value text file. Floats keep full precision."""
    lines = []
    for key, value in items.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict:
    """Read a key=value text file into a dict of strings."""
    items = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return items


def write_f32_raster(path, magic: bytes, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if magic == DEPTH_MAGIC and raster.ndim != 2:
        raise FormatError(f"depth raster must be 2-D, got shape {raster.shape}")
    if magic == FLOW_MAGIC and (raster.ndim != 3 or raster.shape[2] != 2):
        raise FormatError(f"flow raster must be HxWx2, got shape {raster.shape}")
    h, w = raster.shape[:2]
    payload = raster.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", w, h))
        fh.write(payload)


def read_f32_raster(path, magic: bytes) -> np.ndarray:
    """Read a raster written by write_f32_raster; validates magic and size."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    w, h = struct.unpack("<II", data[4:12])
    channels = 2 if magic == FLOW_MAGIC else 1
    expected = 12 + 4 * w * h * channels
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload is {len(data) - 12} bytes, expected {expected - 12} "
            f"for {w}x{h}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=12)
    if channels == 2:
        return flat.reshape(h, w, 2).copy()
    return flat.reshape(h, w).copy()


def write_rgb_png(path, rgb01: np.ndarray) -> None:
    """Write an [0,1] float RGB raster as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(rgb01) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG back to float32 in [0,1] (k/255 grid)."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def write_gray_png(path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def read_gray_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
