"""Overlapping patch grids, annotation clipping and pixel cropping.

Windows advance by ``step = patch * (1 - overlap)`` from the top-left
corner. The last window on each axis is pulled back so it ends flush with
the image edge; images never get padded.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Annotation, DatasetIndex, ImageRecord, json_number
from .errors import BoundsError, ConfigError, DataError, DataIOError
from .geometry import BBox, intersection_area
from .raster import read_image, resize_bilinear, write_png

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SliceConfig:
    patch_w: float = 500
    patch_h: float = 500
    overlap: float = 0.5
    min_visibility: float = 0.25

    def __post_init__(self):
        if not (self.patch_w > 0 and self.patch_h > 0):
            raise ConfigError(f"patch size must be positive, got {self.patch_w}x{self.patch_h}")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"overlap must lie in [0, 1), got {self.overlap}")
        if not 0.0 < self.min_visibility <= 1.0:
            raise ConfigError(f"min_visibility must lie in (0, 1], got {self.min_visibility}")

    @property
    def step_x(self) -> float:
        return self.patch_w * (1.0 - self.overlap)

    @property
    def step_y(self) -> float:
        return self.patch_h * (1.0 - self.overlap)


@dataclass(frozen=True)
class PatchGrid:
    parent_image_id: int
    image_width: float
    image_height: float
    patch_w: float
    patch_h: float
    x_origins: tuple[float, ...]
    y_origins: tuple[float, ...]

    @property
    def window_w(self) -> float:
        return min(self.patch_w, self.image_width)

    @property
    def window_h(self) -> float:
        return min(self.patch_h, self.image_height)

    def __len__(self):
        return len(self.x_origins) * len(self.y_origins)

    def windows(self) -> list[BBox]:
        """Windows in row-major order (top row first, left to right)."""
        return [
            BBox(x, y, self.window_w, self.window_h)
            for y in self.y_origins
            for x in self.x_origins
        ]


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    parent_image_id: int
    origin_x: float
    origin_y: float
    width: float
    height: float
    annotations: tuple[Annotation, ...] = ()

    @property
    def window(self) -> BBox:
        return BBox(self.origin_x, self.origin_y, self.width, self.height)


def axis_origins(size: float, patch: float, step: float) -> list[float]:
    if size <= patch:
        return [0.0]
    origins: list[float] = []
    i = 0
    while True:
        o = i * step
        if o + patch >= size:
            last = min(o, size - patch)
            if not origins or last > origins[-1]:
                origins.append(float(last))
            return origins
        origins.append(float(o))
        i += 1


def compute_patch_grid(img: ImageRecord, cfg: SliceConfig) -> PatchGrid:
    return PatchGrid(
        parent_image_id=img.image_id,
        image_width=float(img.width),
        image_height=float(img.height),
        patch_w=float(cfg.patch_w),
        patch_h=float(cfg.patch_h),
        x_origins=tuple(axis_origins(img.width, cfg.patch_w, cfg.step_x)),
        y_origins=tuple(axis_origins(img.height, cfg.patch_h, cfg.step_y)),
    )


def visibility(ann_box: BBox, window: BBox) -> float:
    """Fraction of ``ann_box``'s area that falls inside ``window``."""
    return intersection_area(ann_box, window) / ann_box.area


def slice_annotations(
    img_annotations: Sequence[Annotation],
    grid: PatchGrid,
    cfg: SliceConfig,
    first_patch_id: int = 0,
    first_annotation_id: int = 1,
) -> list[PatchRecord]:
    """Clip annotations into every window of ``grid``.

    A box is kept in a window when at least ``cfg.min_visibility`` of its area
    lies inside (inclusive). Kept boxes are clipped, shifted to patch-local
    coordinates and remember their parent annotation in ``source_id``. New
    annotation ids are sequential from ``first_annotation_id`` and refer to
    the patch as their ``image_id``.
    """
    for ann in img_annotations:
        if ann.image_id != grid.parent_image_id:
            raise DataError(
                f"annotation {ann.id} belongs to image {ann.image_id}, "
                f"not grid image {grid.parent_image_id}"
            )
    arr = np.array([a.bbox.corners for a in img_annotations], dtype=np.float64).reshape(-1, 4)
    sides = np.array([(a.bbox.w, a.bbox.h) for a in img_annotations], dtype=np.float64).reshape(-1, 2)
    areas = np.array([a.bbox.area for a in img_annotations], dtype=np.float64)

    records = []
    next_ann = first_annotation_id
    for k, win in enumerate(grid.windows()):
        pid = first_patch_id + k
        wx1, wy1, wx2, wy2 = win.corners
        x1 = np.maximum(arr[:, 0], wx1)
        y1 = np.maximum(arr[:, 1], wy1)
        x2 = np.minimum(arr[:, 2], wx2)
        y2 = np.minimum(arr[:, 3], wy2)
        # an uncut side keeps its exact extent
        iw = np.minimum(x2 - x1, sides[:, 0])
        ih = np.minimum(y2 - y1, sides[:, 1])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        keep = np.flatnonzero((inter > 0) & (inter / areas >= cfg.min_visibility))
        local = []
        for j in keep:
            src = img_annotations[j]
            local.append(
                Annotation(
                    id=next_ann,
                    image_id=pid,
                    category_id=src.category_id,
                    bbox=BBox(float(x1[j] - wx1), float(y1[j] - wy1), float(iw[j]), float(ih[j])),
                    source_id=src.id,
                )
            )
            next_ann += 1
        records.append(
            PatchRecord(pid, grid.parent_image_id, win.x, win.y, win.w, win.h, tuple(local))
        )
    return records


def _round_px(v: float) -> int:
    return int(math.floor(v + 0.5))


def pixel_window(window: BBox) -> tuple[int, int, int, int]:
    """Integer ``(x0, y0, x1, y1)`` pixel span of a real-valued window."""
    x0, y0 = _round_px(window.x), _round_px(window.y)
    return x0, y0, x0 + _round_px(window.w), y0 + _round_px(window.h)


def slice_image_pixels(img_pixels: np.ndarray, window: BBox) -> np.ndarray:
    h, w = img_pixels.shape[:2]
    x0, y0, x1, y1 = pixel_window(window)
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h or x1 <= x0 or y1 <= y0:
        raise BoundsError(f"window {window.to_list()} outside raster of size {w}x{h}")
    return img_pixels[y0:y1, x0:x1].copy()


@dataclass(frozen=True)
class ManifestEntry:
    patch_id: int
    parent_image_id: int
    origin_x: float
    origin_y: float
    width: float
    height: float
    patch_file_name: str
    parent_width: float
    parent_height: float

    def to_dict(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "parent_image_id": self.parent_image_id,
            "origin_x": json_number(self.origin_x),
            "origin_y": json_number(self.origin_y),
            "width": json_number(self.width),
            "height": json_number(self.height),
            "patch_file_name": self.patch_file_name,
            "parent_width": json_number(self.parent_width),
            "parent_height": json_number(self.parent_height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        try:
            return cls(
                patch_id=int(d["patch_id"]),
                parent_image_id=int(d["parent_image_id"]),
                origin_x=float(d["origin_x"]),
                origin_y=float(d["origin_y"]),
                width=float(d["width"]),
                height=float(d["height"]),
                patch_file_name=str(d.get("patch_file_name", "")),
                parent_width=float(d.get("parent_width", math.inf)),
                parent_height=float(d.get("parent_height", math.inf)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad manifest record {d!r}: {e}") from e


Manifest = dict[int, ManifestEntry]


def manifest_to_list(manifest: Manifest) -> list[dict]:
    return [manifest[k].to_dict() for k in sorted(manifest)]


def manifest_from_list(records: Sequence[dict]) -> Manifest:
    out: Manifest = {}
    for rec in records:
        e = ManifestEntry.from_dict(rec)
        if e.patch_id in out:
            raise DataError(f"duplicate patch id {e.patch_id} in manifest")
        out[e.patch_id] = e
    return out


def patch_file_name(parent: ImageRecord, patch_id: int) -> str:
    stem = Path(parent.file_path).stem or f"image_{parent.image_id}"
    return f"{stem}__p{patch_id:06d}.png"


def slice_dataset(
    ds: DatasetIndex,
    cfg: SliceConfig,
    image_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
    first_patch_id: int = 1,
) -> tuple[DatasetIndex, Manifest, list[PatchRecord]]:
    """Slice every image of ``ds`` into patches.

    Returns the patched COCO dataset (one image per patch, patch-local
    annotations), the manifest and the raw patch records. Patch ids run from
    ``first_patch_id`` in image-id order, row-major within an image. When
    both ``image_dir`` and ``out_dir`` are given the pixel patches are
    written too.
    """
    ds.validate()
    write_pixels = image_dir is not None and out_dir is not None
    images = sorted(ds.images, key=lambda im: im.image_id)

    all_records: list[PatchRecord] = []
    per_image: list[tuple[ImageRecord, list[PatchRecord]]] = []
    next_pid, next_aid = first_patch_id, 1
    for img in images:
        grid = compute_patch_grid(img, cfg)
        anns = ds.annotations_by_image.get(img.image_id, [])
        recs = slice_annotations(anns, grid, cfg, next_pid, next_aid)
        next_pid += len(recs)
        next_aid += sum(len(r.annotations) for r in recs)
        per_image.append((img, recs))
        all_records.extend(recs)

    if write_pixels:
        image_dir, out_dir = Path(image_dir), Path(out_dir)
        for img, _ in per_image:
            if not (image_dir / img.file_path).is_file():
                raise DataIOError(f"image file not found: {image_dir / img.file_path}")

        def crop_all(item):
            img, recs = item
            pixels = read_image(image_dir / img.file_path)
            if pixels.shape[1] != int(img.width) or pixels.shape[0] != int(img.height):
                raise DataError(
                    f"image {img.file_path} is {pixels.shape[1]}x{pixels.shape[0]}, "
                    f"dataset says {img.width}x{img.height}"
                )
            for r in recs:
                write_png(out_dir / patch_file_name(img, r.patch_id), slice_image_pixels(pixels, r.window))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(crop_all, per_image))
        else:
            for item in per_image:
                crop_all(item)

    patch_images = []
    manifest: Manifest = {}
    for img, recs in per_image:
        for r in recs:
            name = patch_file_name(img, r.patch_id)
            patch_images.append(
                ImageRecord(r.patch_id, name, r.width, r.height, img.metadata,
                            {"parent_image_id": img.image_id})
            )
            manifest[r.patch_id] = ManifestEntry(
                r.patch_id, img.image_id, r.origin_x, r.origin_y, r.width, r.height,
                name, float(img.width), float(img.height),
            )
    patched = DatasetIndex(
        images=patch_images,
        annotations=[a for r in all_records for a in r.annotations],
        categories=ds.categories,
        extra=dict(ds.extra),
    )
    log.info("sliced %d images into %d patches", len(images), len(all_records))
    return patched, manifest, all_records


def patch_records_from_dataset(patched: DatasetIndex, manifest: Manifest) -> list[PatchRecord]:
    """Rebuild patch records from a patched COCO dataset and its manifest."""
    out = []
    by_image = patched.annotations_by_image
    for img in sorted(patched.images, key=lambda im: im.image_id):
        e = manifest.get(img.image_id)
        if e is None:
            raise DataError(f"patch image {img.image_id} missing from manifest")
        out.append(
            PatchRecord(e.patch_id, e.parent_image_id, e.origin_x, e.origin_y, e.width, e.height,
                        tuple(by_image.get(img.image_id, [])))
        )
    return out


def scale_annotations(
    annotations: Sequence[Annotation], sx: float, sy: float,
    bounds: tuple[float, float] | None = None,
) -> list[Annotation]:
    """Scale boxes by ``(sx, sy)``; sides shorter than one pixel become one pixel."""
    out = []
    for a in annotations:
        b = a.bbox
        x, y = b.x * sx, b.y * sy
        w, h = max(b.w * sx, 1.0), max(b.h * sy, 1.0)
        if bounds is not None:
            x = min(x, max(bounds[0] - w, 0.0))
            y = min(y, max(bounds[1] - h, 0.0))
        out.append(Annotation(a.id, a.image_id, a.category_id, BBox(x, y, w, h), a.source_id, a.extra))
    return out


def downscale_image(
    img_pixels: np.ndarray,
    target_w: int,
    target_h: int,
    annotations: Sequence[Annotation],
) -> tuple[np.ndarray, list[Annotation]]:
    if target_w <= 0 or target_h <= 0:
        raise ConfigError(f"target size must be positive, got {target_w}x{target_h}")
    h, w = img_pixels.shape[:2]
    sx, sy = target_w / w, target_h / h
    raster = resize_bilinear(img_pixels, target_w, target_h)
    return raster, scale_annotations(annotations, sx, sy, bounds=(target_w, target_h))
