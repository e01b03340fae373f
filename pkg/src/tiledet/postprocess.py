"""Reprojection of patch detections and duplicate resolution.

Merging semantics (NMM):

1. Detections are ranked by score descending, ties broken on ``x, y, w, h``.
2. The best unconsumed detection becomes the anchor. Every unconsumed
   detection of the same class whose IoU with the anchor reaches the
   threshold is absorbed at once: the anchor box becomes the hull and its
   score the maximum. Absorption repeats against the grown hull until a
   round absorbs nothing, then the anchor is emitted.
3. Whole passes repeat over the output until a pass merges nothing, so the
   result never contains a same-class pair at or above the threshold.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .dataset import Detection
from .errors import ConfigError, DataError
from .geometry import BBox, iou_matrix
from .slicer import Manifest


PAIRWISE_MAX = 256


class MergeMode(str, Enum):
    NMM = "nmm"
    NMS = "nms"
    NONE = "none"


@dataclass(frozen=True)
class PostprocessConfig:
    mode: MergeMode = MergeMode.NMM
    iou_threshold: float = 0.20
    class_agnostic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", MergeMode(self.mode))
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")


def rank_key(d: Detection):
    return (-d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.category_id)


def reproject(dets: Iterable[Detection], manifest: Manifest) -> list[Detection]:
    """Move patch-local boxes into parent-image coordinates.

    Detections that already carry an ``image_id`` and no ``patch_id`` pass
    through unchanged.
    """
    out = []
    for d in dets:
        if d.patch_id is None:
            if d.image_id is None:
                raise DataError("detection has neither patch_id nor image_id")
            out.append(d)
            continue
        e = manifest.get(d.patch_id)
        if e is None:
            raise DataError(f"detection references unknown patch {d.patch_id}")
        x1 = min(max(d.bbox.x + e.origin_x, 0.0), e.parent_width)
        y1 = min(max(d.bbox.y + e.origin_y, 0.0), e.parent_height)
        x2 = min(d.bbox.x + d.bbox.w + e.origin_x, e.parent_width)
        y2 = min(d.bbox.y + d.bbox.h + e.origin_y, e.parent_height)
        if x2 <= x1 or y2 <= y1:
            raise DataError(f"detection {d.bbox.to_list()} in patch {d.patch_id} falls outside its parent image")
        out.append(Detection(BBox(x1, y1, x2 - x1, y2 - y1), d.category_id, d.score, image_id=e.parent_image_id))
    return out


def _groups(dets: Sequence[Detection], class_agnostic: bool) -> list[list[Detection]]:
    groups: dict = {}
    for d in dets:
        key = (d.image_id, None if class_agnostic else d.category_id)
        groups.setdefault(key, []).append(d)
    return [groups[k] for k in sorted(groups, key=lambda k: (k[0] if k[0] is not None else -1, k[1] or 0))]


def _merge_pass(dets: list[Detection], threshold: float) -> tuple[list[Detection], bool]:
    dets = sorted(dets, key=rank_key)
    xywh = np.array([d.bbox.to_list() for d in dets], dtype=np.float64).reshape(-1, 4)
    boxes = np.array([d.bbox.corners for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    free = np.ones(len(dets), dtype=bool)
    # small groups share one pairwise table; rows are recomputed once an anchor grows
    pairwise = iou_matrix(xywh, xywh) if len(dets) <= PAIRWISE_MAX else None
    out: list[Detection] = []
    merged_any = False
    for i, anchor in enumerate(dets):
        if not free[i]:
            continue
        free[i] = False
        box = anchor.bbox
        score = anchor.score
        grown = False
        while True:
            cand = np.flatnonzero(free)
            if len(cand) == 0:
                break
            if grown or pairwise is None:
                ious = iou_matrix(np.array([[box.x, box.y, box.w, box.h]]), xywh[cand])[0]
            else:
                ious = pairwise[i, cand]
            hit = cand[ious >= threshold]
            if len(hit) == 0:
                break
            free[hit] = False
            merged_any = True
            x1 = min(box.x, float(boxes[hit, 0].min()))
            y1 = min(box.y, float(boxes[hit, 1].min()))
            x2 = max(box.x + box.w, float(boxes[hit, 2].max()))
            y2 = max(box.y + box.h, float(boxes[hit, 3].max()))
            box = BBox(x1, y1, x2 - x1, y2 - y1)
            grown = True
            score = max(score, float(scores[hit].max()))
        out.append(Detection(box, anchor.category_id, score, anchor.patch_id, anchor.image_id))
    return out, merged_any


def _merge_group(dets: list[Detection], threshold: float) -> list[Detection]:
    merged = True
    while merged and len(dets) > 1:
        dets, merged = _merge_pass(dets, threshold)
    return dets


def nmm_merge(dets: Sequence[Detection], cfg: PostprocessConfig) -> list[Detection]:
    out = []
    for group in _groups(dets, cfg.class_agnostic):
        out.extend(_merge_group(group, cfg.iou_threshold))
    return sorted(out, key=rank_key)


def nms_suppress(dets: Sequence[Detection], cfg: PostprocessConfig) -> list[Detection]:
    out = []
    for group in _groups(dets, cfg.class_agnostic):
        group = sorted(group, key=rank_key)
        xywh = np.array([d.bbox.to_list() for d in group], dtype=np.float64).reshape(-1, 4)
        alive = np.ones(len(group), dtype=bool)
        for i, d in enumerate(group):
            if not alive[i]:
                continue
            out.append(d)
            rest = np.flatnonzero(alive)
            rest = rest[rest > i]
            if len(rest):
                ious = iou_matrix(xywh[i:i + 1], xywh[rest])[0]
                alive[rest[ious >= cfg.iou_threshold]] = False
    return sorted(out, key=rank_key)


def resolve(dets: Sequence[Detection], cfg: PostprocessConfig) -> list[Detection]:
    if cfg.mode is MergeMode.NMM:
        return nmm_merge(dets, cfg)
    if cfg.mode is MergeMode.NMS:
        return nms_suppress(dets, cfg)
    return sorted(dets, key=rank_key)


def postprocess_pipeline(
    dets: Iterable[Detection],
    manifest: Manifest,
    cfg: PostprocessConfig,
    workers: int = 1,
) -> dict[int, list[Detection]]:
    """Reproject, group by parent image, then merge/suppress per image."""
    by_image: dict[int, list[Detection]] = {}
    for d in reproject(dets, manifest):
        by_image.setdefault(d.image_id, []).append(d)
    keys = sorted(by_image)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda k: resolve(by_image[k], cfg), keys))
    else:
        results = [resolve(by_image[k], cfg) for k in keys]
    return dict(zip(keys, results))


def flatten(per_image: dict[int, list[Detection]]) -> list[Detection]:
    return [d for k in sorted(per_image) for d in per_image[k]]
