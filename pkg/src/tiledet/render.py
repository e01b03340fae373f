"""Draw detections onto an image."""

from __future__ import annotations

import colorsys
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .dataset import Detection


def class_palette(category_ids: Sequence[int]) -> dict[int, tuple[int, int, int]]:
    """One fixed, well-separated RGB colour per category, in id order."""
    ids = sorted(category_ids)
    n = max(len(ids), 1)
    out = {}
    for k, cid in enumerate(ids):
        hue = k / n
        # alternate value so neighbouring hues stay distinguishable
        val = 1.0 if k % 2 == 0 else 0.75
        r, g, b = colorsys.hsv_to_rgb(hue, 0.85, val)
        out[cid] = (round(r * 255), round(g * 255), round(b * 255))
    return out


def render_detections(
    image: np.ndarray,
    detections: Sequence[Detection],
    names: Mapping[int, str],
    confidence_threshold: float = 0.60,
    palette: Mapping[int, tuple[int, int, int]] | None = None,
    line_width: int = 3,
) -> np.ndarray:
    """Boxes at or above ``confidence_threshold`` with ``name score`` labels.

    Returns an RGB uint8 array; the input is only converted to RGB, never
    otherwise altered, when nothing is drawn.
    """
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr).convert("RGB")
    palette = palette or class_palette(list(names))
    shown = sorted(
        (d for d in detections if d.score >= confidence_threshold),
        key=lambda d: (d.score, d.bbox.x, d.bbox.y),
    )
    if not shown:
        return np.asarray(im).copy()
    draw = ImageDraw.Draw(im)
    font = ImageFont.load_default()
    for d in shown:
        color = palette.get(d.category_id, (255, 255, 255))
        x1, y1, x2, y2 = d.bbox.corners
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=color, width=line_width)
        label = f"{names.get(d.category_id, str(d.category_id))} {d.score:.2f}"
        tx, ty = x1, max(y1 - 12, 0)
        l, t, r, b = draw.textbbox((tx, ty), label, font=font)
        draw.rectangle([l - 1, t - 1, r + 1, b + 1], fill=color)
        draw.text((tx, ty), label, fill=(0, 0, 0), font=font)
    return np.asarray(im).copy()
