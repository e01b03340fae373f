"""Raster IO and resampling on ``(H, W)`` or ``(H, W, C)`` numpy arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataIOError

# large survey frames exceed Pillow's decompression-bomb default
Image.MAX_IMAGE_PIXELS = None


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGB")
            return np.asarray(im).copy()
    except FileNotFoundError:
        raise DataIOError(f"image file not found: {path}") from None
    except OSError as e:
        raise DataIOError(f"cannot read image {path}: {e}") from e


def write_png(path: str | Path, raster: np.ndarray) -> None:
    path = Path(path)
    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=1)
    except OSError as e:
        raise DataIOError(f"cannot write image {path}: {e}") from e


def max_value(raster: np.ndarray) -> float:
    if np.issubdtype(raster.dtype, np.integer):
        return float(np.iinfo(raster.dtype).max)
    return 1.0


def restore_dtype(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Round and clamp float results back into ``like``'s dtype range."""
    if np.issubdtype(like.dtype, np.integer):
        info = np.iinfo(like.dtype)
        return np.clip(np.rint(values), info.min, info.max).astype(like.dtype)
    return np.clip(values, 0.0, 1.0).astype(like.dtype)


def resize_bilinear(raster: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resample to ``width`` x ``height``; keeps dtype and channel count."""
    arr = np.asarray(raster)
    if arr.shape[1] == width and arr.shape[0] == height:
        return arr.copy()
    planes = arr[..., None] if arr.ndim == 2 else arr
    out = np.empty((height, width, planes.shape[2]), dtype=np.float32)
    for c in range(planes.shape[2]):
        im = Image.fromarray(planes[..., c].astype(np.float32), mode="F")
        out[..., c] = np.asarray(im.resize((width, height), Image.Resampling.BILINEAR))
    out = restore_dtype(out, arr)
    return out[..., 0] if arr.ndim == 2 else out
