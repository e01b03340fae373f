"""Box-aware patch augmentations.

Transforms take a raster (``(H, W)`` or ``(H, W, C)``) and, where geometry
changes, a sequence of patch-local annotations. Pixel-level transforms never
touch boxes.

Parameter ranges not fixed elsewhere are toolkit constants:

* brightness/contrast: ``alpha`` in [0.8, 1.2], ``beta`` in [-0.2, 0.2] of max value
* motion blur: line kernel of odd length 3, 5 or 7 at a uniform random angle
* random shadow: convex polygon darkened by a factor in [0.3, 0.7]
* pixel dropout: 1% of pixel positions zeroed
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .dataset import Annotation
from .errors import ConfigError
from .geometry import BBox, hull
from .raster import max_value, resize_bilinear, restore_dtype

ALPHA_RANGE = (0.8, 1.2)
BETA_RANGE = (-0.2, 0.2)
BLUR_LENGTHS = (3, 5, 7)
SHADOW_FACTOR_RANGE = (0.3, 0.7)
DROPOUT_RATE = 0.01


class Strategy(str, Enum):
    PIXEL = "pixel"
    SPATIAL = "spatial"
    BOTH = "both"
    NONE = "none"


SPATIAL_OPS = ("crop", "hflip", "vflip", "dropout")
PIXEL_OPS = ("blur", "brightness_contrast", "shadow")
# fixed application order
PIPELINE_ORDER = ("crop", "hflip", "vflip", "dropout", "blur", "brightness_contrast", "shadow")
STRATEGY_OPS = {
    Strategy.NONE: (),
    Strategy.PIXEL: PIXEL_OPS,
    Strategy.SPATIAL: SPATIAL_OPS,
    Strategy.BOTH: SPATIAL_OPS + PIXEL_OPS,
}


@dataclass(frozen=True)
class AugmentationSpec:
    strategy: Strategy = Strategy.SPATIAL
    probability: float = 0.5
    seed: int = 0
    crop_target: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"probability must lie in [0, 1], got {self.probability}")
        if self.crop_target is not None:
            w, h = self.crop_target
            if w <= 0 or h <= 0:
                raise ConfigError(f"crop_target must be positive, got {self.crop_target}")
            object.__setattr__(self, "crop_target", (int(w), int(h)))


def _with_boxes(annotations: Sequence[Annotation], boxes: Sequence[BBox]) -> list[Annotation]:
    return [
        Annotation(a.id, a.image_id, a.category_id, b, a.source_id, a.extra)
        for a, b in zip(annotations, boxes)
    ]


def _fit(b: BBox, width: float, height: float) -> BBox:
    """Clamp a box into ``[0, width] x [0, height]`` after float round-off."""
    x1 = min(max(b.x, 0.0), width)
    y1 = min(max(b.y, 0.0), height)
    x2 = min(max(b.x + b.w, x1), width)
    y2 = min(max(b.y + b.h, y1), height)
    if x2 <= x1:
        x1 = max(x2 - 1e-6, 0.0)
    if y2 <= y1:
        y1 = max(y2 - 1e-6, 0.0)
    return BBox(x1, y1, x2 - x1, y2 - y1)


def hflip(raster: np.ndarray, annotations: Sequence[Annotation]) -> tuple[np.ndarray, list[Annotation]]:
    width = raster.shape[1]
    boxes = [_fit(BBox(width - a.bbox.x - a.bbox.w, a.bbox.y, a.bbox.w, a.bbox.h), width, raster.shape[0])
             for a in annotations]
    return raster[:, ::-1].copy(), _with_boxes(annotations, boxes)


def vflip(raster: np.ndarray, annotations: Sequence[Annotation]) -> tuple[np.ndarray, list[Annotation]]:
    height = raster.shape[0]
    boxes = [_fit(BBox(a.bbox.x, height - a.bbox.y - a.bbox.h, a.bbox.w, a.bbox.h), raster.shape[1], height)
             for a in annotations]
    return raster[::-1].copy(), _with_boxes(annotations, boxes)


def bbox_safe_random_crop(
    raster: np.ndarray,
    annotations: Sequence[Annotation],
    target: tuple[int, int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[Annotation]]:
    """Crop a random window containing every box, then resize to ``target``.

    With no boxes the window is any sub-rectangle of at least one pixel.
    """
    H, W = raster.shape[:2]
    tw, th = target
    if annotations:
        hb = hull(a.bbox for a in annotations)
        # integer pixel window that still encloses the hull
        lx, ly = math.floor(hb.x), math.floor(hb.y)
        rx, ry = min(math.ceil(hb.x + hb.w), W), min(math.ceil(hb.y + hb.h), H)
        x0 = int(rng.integers(0, lx + 1))
        y0 = int(rng.integers(0, ly + 1))
        x1 = int(rng.integers(rx, W + 1))
        y1 = int(rng.integers(ry, H + 1))
    else:
        x0 = int(rng.integers(0, W))
        y0 = int(rng.integers(0, H))
        x1 = int(rng.integers(x0 + 1, W + 1))
        y1 = int(rng.integers(y0 + 1, H + 1))
    crop = raster[y0:y1, x0:x1]
    sx, sy = tw / (x1 - x0), th / (y1 - y0)
    out = resize_bilinear(crop, tw, th)
    boxes = [
        _fit(BBox((a.bbox.x - x0) * sx, (a.bbox.y - y0) * sy, a.bbox.w * sx, a.bbox.h * sy), tw, th)
        for a in annotations
    ]
    return out, _with_boxes(annotations, boxes)


def pixel_dropout(raster: np.ndarray, rng: np.random.Generator, rate: float = DROPOUT_RATE) -> np.ndarray:
    mask = rng.random(raster.shape[:2]) < rate
    out = raster.copy()
    out[mask] = 0
    return out


def brightness_contrast(
    raster: np.ndarray,
    rng: np.random.Generator | None = None,
    alpha: float | None = None,
    beta: float | None = None,
) -> np.ndarray:
    """``clamp(alpha * in + beta * max_value)``; unspecified factors are sampled."""
    if alpha is None:
        alpha = float(rng.uniform(*ALPHA_RANGE))
    if beta is None:
        beta = float(rng.uniform(*BETA_RANGE))
    if alpha == 1.0 and beta == 0.0:
        return raster.copy()
    vals = raster.astype(np.float64) * alpha + beta * max_value(raster)
    return restore_dtype(vals, raster)


def motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    k = np.zeros((length, length), dtype=np.float64)
    c = (length - 1) / 2.0
    t = np.linspace(-c, c, 4 * length)
    dx, dy = math.cos(math.radians(angle_deg)), math.sin(math.radians(angle_deg))
    cols = np.clip(np.rint(c + t * dx), 0, length - 1).astype(int)
    rows = np.clip(np.rint(c + t * dy), 0, length - 1).astype(int)
    k[rows, cols] = 1.0
    return k / k.sum()


def motion_blur(
    raster: np.ndarray,
    rng: np.random.Generator,
    length: int | None = None,
    angle_deg: float | None = None,
) -> np.ndarray:
    if length is None:
        length = int(rng.choice(BLUR_LENGTHS))
    if angle_deg is None:
        angle_deg = float(rng.uniform(0.0, 180.0))
    kernel = motion_kernel(length, angle_deg)
    src = raster.astype(np.float64)
    if src.ndim == 2:
        out = ndimage.convolve(src, kernel, mode="nearest")
    else:
        out = np.stack(
            [ndimage.convolve(src[..., c], kernel, mode="nearest") for c in range(src.shape[2])], axis=-1
        )
    return restore_dtype(out, raster)


def _convex_polygon(rng: np.random.Generator, width: int, height: int) -> list[tuple[float, float]]:
    # points on an ellipse at sorted angles always form a convex polygon
    n = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0.0, 2 * math.pi, n))
    cx, cy = rng.uniform(0, width), rng.uniform(0, height)
    rx, ry = rng.uniform(0.15, 0.5) * width, rng.uniform(0.15, 0.5) * height
    return [(float(cx + rx * math.cos(a)), float(cy + ry * math.sin(a))) for a in angles]


def random_shadow(
    raster: np.ndarray, rng: np.random.Generator, factor: float | None = None
) -> np.ndarray:
    H, W = raster.shape[:2]
    if factor is None:
        factor = float(rng.uniform(*SHADOW_FACTOR_RANGE))
    mask_img = Image.new("L", (W, H), 0)
    ImageDraw.Draw(mask_img).polygon(_convex_polygon(rng, W, H), fill=1)
    mask = np.asarray(mask_img).astype(bool)
    out = raster.astype(np.float64)
    out[mask] *= factor
    return restore_dtype(out, raster)


def patch_rng(seed: int, patch_id: int) -> np.random.Generator:
    """Independent stream per patch so results do not depend on scheduling."""
    return np.random.default_rng([int(seed), int(patch_id)])


def apply_strategy(
    raster: np.ndarray,
    annotations: Sequence[Annotation],
    spec: AugmentationSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[Annotation]]:
    """Run the strategy's transforms in the fixed order, each with ``spec.probability``."""
    ops = STRATEGY_OPS[spec.strategy]
    out, anns = raster.copy(), list(annotations)
    for op in PIPELINE_ORDER:
        if op not in ops:
            continue
        if rng.random() >= spec.probability:
            continue
        if op == "crop":
            target = spec.crop_target or (out.shape[1], out.shape[0])
            out, anns = bbox_safe_random_crop(out, anns, target, rng)
        elif op == "hflip":
            out, anns = hflip(out, anns)
        elif op == "vflip":
            out, anns = vflip(out, anns)
        elif op == "dropout":
            out = pixel_dropout(out, rng)
        elif op == "blur":
            out = motion_blur(out, rng)
        elif op == "brightness_contrast":
            out = brightness_contrast(out, rng)
        elif op == "shadow":
            out = random_shadow(out, rng)
    return out, anns


def augment_patch(patch, raster: np.ndarray, spec: AugmentationSpec) -> tuple[np.ndarray, list[Annotation]]:
    """Augment one :class:`~tiledet.slicer.PatchRecord` with its own RNG stream."""
    return apply_strategy(raster, patch.annotations, spec, patch_rng(spec.seed, patch.patch_id))


def augmented_file_name(name: str, seed: int) -> str:
    stem, dot, ext = name.rpartition(".")
    if not dot:
        return f"{name}__aug{seed}"
    return f"{stem}__aug{seed}.{ext}"
