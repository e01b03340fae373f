"""Synthetic benthic-style detection datasets with exact ground truth.

Objects are coloured shapes on a textured background. Class frequencies are
long-tailed, boxes never overlap (a configurable gap separates them) and
every box is exactly the pixel extent of the shape drawn into it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, ImageDraw

from .dataset import Annotation, Category, CategoryTable, DatasetIndex, EnvMetadata, ImageRecord, save_coco, wsbd_categories
from .errors import ConfigError, DataError
from .geometry import BBox
from .raster import write_png
from .render import class_palette

log = logging.getLogger(__name__)

SHAPES = ("ellipse", "rectangle", "diamond")
MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 20
    width_range: tuple[int, int] = (2800, 3400)
    height_range: tuple[int, int] = (3700, 4300)
    # exact total per class; when absent, a long tail is drawn from objects_per_image
    class_counts: Mapping[int, int] | None = None
    objects_per_image: tuple[int, int] = (60, 240)
    tail_exponent: float = 1.1
    small_fraction: float = 0.35
    small_side: tuple[int, int] = (2, 31)
    large_side: tuple[int, int] = (32, 240)
    min_gap: int = 12
    depth_range: tuple[float, float] = (421.0, 2202.0)
    inclination_range: tuple[float, float] = (0.0, 80.0)
    seed: int = 0
    categories: CategoryTable = field(default_factory=wsbd_categories)

    def __post_init__(self):
        if self.n_images < 1:
            raise ConfigError("n_images must be at least 1")
        for name in ("width_range", "height_range", "objects_per_image", "small_side", "large_side"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must be an increasing non-negative range, got {(lo, hi)}")
        if not 0.0 <= self.small_fraction <= 1.0:
            raise ConfigError("small_fraction must lie in [0, 1]")
        if self.small_side[0] < 1 or self.large_side[0] < 1:
            raise ConfigError("object sides must be at least 1 px")
        if self.class_counts is not None:
            for cid, n in self.class_counts.items():
                if cid not in self.categories:
                    raise ConfigError(f"class_counts names unknown category {cid}")
                if n < 0:
                    raise ConfigError(f"negative count for category {cid}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        d = dict(d)
        if "class_counts" in d and d["class_counts"] is not None:
            d["class_counts"] = {int(k): int(v) for k, v in d["class_counts"].items()}
        if "categories" in d:
            names = d.pop("categories")
            d["categories"] = CategoryTable(Category(i, str(n)) for i, n in enumerate(names, start=1))
        for k in ("width_range", "height_range", "objects_per_image", "small_side", "large_side",
                  "depth_range", "inclination_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def long_tail_counts(total: int, category_ids, exponent: float) -> dict[int, int]:
    """Split ``total`` over categories with Zipf-like weights, every class at least 1."""
    ids = list(category_ids)
    w = 1.0 / np.arange(1, len(ids) + 1) ** exponent
    raw = w / w.sum() * max(total - len(ids), 0)
    counts = np.floor(raw).astype(int) + 1
    # largest remainders take the leftover units
    short = total - counts.sum()
    for k in np.argsort(-(raw - np.floor(raw)), kind="stable")[: max(short, 0)]:
        counts[k] += 1
    return {cid: int(n) for cid, n in zip(ids, counts)}


def _place(rng, W, H, side_lo, side_hi, placed: list[tuple[int, int, int, int]], gap: int):
    for _ in range(MAX_PLACEMENT_TRIES):
        w = int(rng.integers(side_lo, side_hi + 1))
        h = int(rng.integers(side_lo, side_hi + 1))
        w, h = min(w, W), min(h, H)
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        if placed:
            p = np.asarray(placed)
            clear = (
                (x + w + gap <= p[:, 0])
                | (p[:, 0] + p[:, 2] + gap <= x)
                | (y + h + gap <= p[:, 1])
                | (p[:, 1] + p[:, 3] + gap <= y)
            )
            if not clear.all():
                continue
        return x, y, w, h
    return None


def synthesize(spec: SynthSpec) -> DatasetIndex:
    """Generate the annotation side of a synthetic dataset (no pixels)."""
    rng = np.random.default_rng(spec.seed)
    cats = spec.categories
    sizes = [
        (int(rng.integers(spec.width_range[0], spec.width_range[1] + 1)),
         int(rng.integers(spec.height_range[0], spec.height_range[1] + 1)))
        for _ in range(spec.n_images)
    ]
    if spec.class_counts is not None:
        counts = {cid: int(spec.class_counts.get(cid, 0)) for cid in cats.ids}
    else:
        per_image = rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1, spec.n_images)
        # abundance rank is shuffled so the head class is not always id 1
        order = list(rng.permutation(cats.ids))
        counts = long_tail_counts(int(per_image.sum()), order, spec.tail_exponent)

    labels = np.array([cid for cid in cats.ids for _ in range(counts[cid])], dtype=np.int64)
    rng.shuffle(labels)
    areas = np.array([w * h for w, h in sizes], dtype=np.float64)
    owner = rng.choice(spec.n_images, size=len(labels), p=areas / areas.sum()) if len(labels) else np.zeros(0, int)
    is_small = rng.random(len(labels)) < spec.small_fraction

    images, anns = [], []
    next_id = 1
    for i, (W, H) in enumerate(sizes):
        image_id = i + 1
        meta = EnvMetadata(
            substrate="hard" if rng.random() < 0.5 else "soft",
            depth_m=round(float(rng.uniform(*spec.depth_range)), 1),
            inclination_deg=round(float(rng.uniform(*spec.inclination_range)), 1),
        )
        images.append(ImageRecord(image_id, f"synth_{image_id:04d}.png", W, H, meta))
        placed: list[tuple[int, int, int, int]] = []
        # big objects first so small ones fill the gaps
        idx = np.flatnonzero(owner == i)
        idx = idx[np.argsort(is_small[idx], kind="stable")]
        for j in idx:
            lo, hi = spec.small_side if is_small[j] else spec.large_side
            spot = _place(rng, W, H, lo, hi, placed, spec.min_gap)
            if spot is None:
                spot = _place(rng, W, H, spec.small_side[0], spec.small_side[0], placed, spec.min_gap)
            if spot is None:
                raise DataError(f"image {image_id} too crowded to place object {next_id}; lower the object count")
            placed.append(spot)
            anns.append(Annotation(next_id, image_id, int(labels[j]), BBox(*map(float, spot))))
            next_id += 1
    anns.sort(key=lambda a: (a.image_id, a.id))
    ds = DatasetIndex(images, anns, cats, {"info": {"description": "synthetic", "seed": spec.seed}})
    return ds.validate()


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, b: BBox, fill) -> None:
    x0, y0 = int(b.x), int(b.y)
    x1, y1 = int(b.x + b.w) - 1, int(b.y + b.h) - 1
    if shape == "rectangle" or x1 - x0 < 2 or y1 - y0 < 2:
        draw.rectangle([x0, y0, x1, y1], fill=fill)
    elif shape == "ellipse":
        draw.ellipse([x0, y0, x1, y1], fill=fill)
    else:
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=fill)


def render_image(ds: DatasetIndex, image_id: int, seed: int = 0, return_mask: bool = False):
    """Rasterise one synthetic image as ``(H, W, 3)`` uint8.

    With ``return_mask`` a label mask (category id per pixel, 0 background)
    is returned as well.
    """
    img = ds.image_by_id[image_id]
    W, H = int(img.width), int(img.height)
    rng = np.random.default_rng([int(seed), int(image_id)])
    coarse = rng.uniform(40, 110, (max(H // 256, 2), max(W // 256, 2), 3)).astype(np.float32)
    base = np.stack(
        [np.asarray(Image.fromarray(coarse[..., c], mode="F").resize((W, H), Image.Resampling.BILINEAR))
         for c in range(3)],
        axis=-1,
    )
    grain = rng.integers(-12, 13, (H, W, 1), dtype=np.int16)
    raster = np.clip(base + grain, 0, 255).astype(np.uint8)

    canvas = Image.fromarray(raster)
    mask = Image.new("I", (W, H), 0)
    draw, mdraw = ImageDraw.Draw(canvas), ImageDraw.Draw(mask)
    palette = class_palette(ds.categories.ids)
    for a in ds.annotations_by_image.get(image_id, []):
        shape = SHAPES[a.category_id % len(SHAPES)]
        _draw_shape(draw, shape, a.bbox, palette[a.category_id])
        _draw_shape(mdraw, shape, a.bbox, a.category_id)
    out = np.asarray(canvas).copy()
    if return_mask:
        return out, np.asarray(mask).astype(np.int32)
    return out


def write_synthetic(spec: SynthSpec, out_dir: str | Path, write_images: bool = True) -> DatasetIndex:
    """Write ``dataset.json`` and, optionally, ``images/*.png`` under ``out_dir``."""
    out_dir = Path(out_dir)
    ds = synthesize(spec)
    save_coco(ds, out_dir / "dataset.json")
    if write_images:
        for img in ds.images:
            write_png(out_dir / "images" / img.file_path, render_image(ds, img.image_id, spec.seed))
    log.info("wrote %d synthetic images, %d annotations to %s", len(ds.images), len(ds.annotations), out_dir)
    return ds
