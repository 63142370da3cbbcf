"""Raster and tensor file I/O.

Two small binary formats plus 8-bit PNG:

* ``.sal`` float raster: magic ``SAL1``, little-endian u32 width, u32
  height, then width*height little-endian f32 values in row-major order.
* ``.ten`` tensor blob: magic ``TEN1``, little-endian u32 rank, one u32
  per dimension, then the f32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadImage, CorruptFile

SAL_MAGIC = b"SAL1"
TEN_MAGIC = b"TEN1"


def write_sal(path: str | Path, raster: np.ndarray) -> None:
    """Write a 2D float raster as a .sal file."""
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim != 2:
        raise CorruptFile(f"expected a 2D raster, got shape {raster.shape}")
    if not np.all(np.isfinite(raster)):
        raise CorruptFile("raster contains non-finite values")
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(SAL_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(raster.astype("<f4").tobytes())


def read_sal(path: str | Path) -> np.ndarray:
    """Read a .sal file into a float64 (height, width) array."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != SAL_MAGIC:
        raise CorruptFile(f"{path}: not a SAL1 raster")
    w, h = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * w * h
    if len(blob) != expected:
        raise CorruptFile(f"{path}: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=12)
    return data.reshape(h, w).astype(np.float64)


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Write an N-dimensional float tensor as a TEN1 blob (f32 payload)."""
    tensor = np.asarray(tensor, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(TEN_MAGIC)
        fh.write(struct.pack("<I", tensor.ndim))
        fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        fh.write(tensor.astype("<f4").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a TEN1 blob into a float64 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != TEN_MAGIC:
        raise CorruptFile(f"{path}: not a TEN1 tensor")
    (rank,) = struct.unpack("<I", blob[4:8])
    header_end = 8 + 4 * rank
    if rank == 0 or rank > 8 or len(blob) < header_end:
        raise CorruptFile(f"{path}: bad tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", blob[8:header_end])
    count = int(np.prod(dims))
    if len(blob) != header_end + 4 * count:
        raise CorruptFile(f"{path}: truncated tensor payload")
    data = np.frombuffer(blob, dtype="<f4", offset=header_end)
    return data.reshape(dims).astype(np.float64)


def read_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit PNG/JPEG as float64 in [0, 255].

    Returns (h, w) for grayscale input and (h, w, 3) for color.
    """
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as exc:
        raise BadImage(f"{path}: {exc}") from exc
    if img.mode in ("L", "I;16", "I"):
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr


def write_image(path: str | Path, raster: np.ndarray) -> None:
    """Write a float raster as an 8-bit PNG.

    Color input is taken in [0, 255]; single-channel input is taken in
    [0, 1] (linear luminance, the saliency export convention).
    """
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim == 2:
        scaled = np.clip(raster, 0.0, 1.0) * 255.0
        img = Image.fromarray(np.round(scaled).astype(np.uint8), mode="L")
    elif raster.ndim == 3 and raster.shape[2] == 3:
        img = Image.fromarray(
            np.round(np.clip(raster, 0.0, 255.0)).astype(np.uint8), mode="RGB"
        )
    else:
        raise BadImage(f"cannot encode raster of shape {raster.shape}")
    img.save(path, format="PNG")


def read_saliency(path: str | Path) -> np.ndarray:
    """Read a saliency raster from either a .sal file or an 8-bit PNG.

    PNG values are rescaled from [0, 255] to [0, 1].
    """
    path = Path(path)
    if path.suffix == ".sal":
        return read_sal(path)
    arr = read_image(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr / 255.0
