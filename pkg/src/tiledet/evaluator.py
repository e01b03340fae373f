"""COCO-style detection evaluation on whole-image detections.

Matching follows the COCO protocol: per image and class, detections are
visited by descending score and each claims the unmatched ground-truth box
with the highest IoU at or above the threshold, preferring boxes inside the
current size bucket. Detections that claim an out-of-bucket box, or that
are unmatched and themselves out of bucket, are ignored. AP is the
101-point interpolated area under the precision envelope.

Deviation from pycocotools: a class with no ground truth is excluded only
when it also has no considered detections; otherwise it scores AP 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dataset import Annotation, DatasetIndex, Detection
from .errors import ConfigError, DataError
from .geometry import iou_matrix

SMALL_MAX = 32.0**2
MEDIUM_MAX = 96.0**2
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, SMALL_MAX),
    "medium": (SMALL_MAX, MEDIUM_MAX),
    "large": (MEDIUM_MAX, math.inf),
}
RECALL_POINTS = np.arange(101) / 100.0
DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    max_dets_per_image: int = 2000
    class_subset: tuple[int, ...] | None = None
    confusion_confidence: float = 0.60
    confusion_iou: float = 0.5

    def __post_init__(self):
        ts = tuple(float(t) for t in self.iou_thresholds)
        if not ts or any(not 0.0 < t <= 1.0 for t in ts):
            raise ConfigError(f"IoU thresholds must lie in (0, 1]: {ts}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError(f"IoU thresholds must be strictly increasing: {ts}")
        object.__setattr__(self, "iou_thresholds", ts)
        if self.max_dets_per_image < 1:
            raise ConfigError("max_dets_per_image must be at least 1")
        if self.class_subset is not None:
            object.__setattr__(self, "class_subset", tuple(int(c) for c in self.class_subset))
        if not 0.0 <= self.confusion_confidence <= 1.0:
            raise ConfigError("confusion_confidence must lie in [0, 1]")


def area_bucket(area: float) -> str:
    if area < SMALL_MAX:
        return "small"
    if area < MEDIUM_MAX:
        return "medium"
    return "large"


# -- matching -----------------------------------------------------------------


@dataclass
class Matching:
    """Result of matching one image/class at one IoU threshold.

    Arrays are aligned with the score-sorted, capped detection list.
    ``det_match`` holds the matched ground-truth index or -1.
    """

    scores: np.ndarray
    det_match: np.ndarray
    det_ignore: np.ndarray
    gt_match: np.ndarray
    gt_ignore: np.ndarray

    @property
    def tp(self) -> int:
        return int(np.sum((self.det_match >= 0) & ~self.det_ignore))

    @property
    def fp(self) -> int:
        return int(np.sum((self.det_match < 0) & ~self.det_ignore))

    @property
    def fn(self) -> int:
        return int(np.sum((self.gt_match < 0) & ~self.gt_ignore))


def _order_dets(dets: Sequence[Detection], max_dets: int) -> list[Detection]:
    order = np.argsort([-d.score for d in dets], kind="mergesort")
    return [dets[i] for i in order[:max_dets]]


def _match(
    ious: np.ndarray,
    det_areas: np.ndarray,
    gt_ignore: np.ndarray,
    t: float,
    area_rng: tuple[float, float],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_d, n_g = ious.shape
    det_match = np.full(n_d, -1, dtype=np.int64)
    det_ignore = np.zeros(n_d, dtype=bool)
    gt_match = np.full(n_g, -1, dtype=np.int64)
    if n_g:
        # candidates per detection, in-bucket ground truth first
        nz_rows, nz_cols = np.nonzero(ious >= t)
        cands: list[list[int]] = [[] for _ in range(n_d)]
        for r, c in zip(nz_rows.tolist(), nz_cols.tolist()):
            cands[r].append(c)
        for d in range(n_d):
            best, best_iou = -1, -1.0
            best_ign = True
            for g in cands[d]:
                if gt_match[g] >= 0:
                    continue
                ign = bool(gt_ignore[g])
                v = ious[d, g]
                if best >= 0 and not best_ign and ign:
                    continue
                if best >= 0 and best_ign and not ign:
                    best, best_iou, best_ign = g, v, ign
                    continue
                if v >= best_iou:
                    best, best_iou, best_ign = g, v, ign
            if best >= 0:
                det_match[d] = best
                gt_match[best] = d
                det_ignore[d] = best_ign
    lo, hi = area_rng
    outside = (det_areas < lo) | (det_areas >= hi)
    det_ignore |= (det_match < 0) & outside
    return det_match, det_ignore, gt_match


def match_detections(
    gt: Sequence[Annotation],
    dets: Sequence[Detection],
    iou_t: float,
    max_dets: int = 2000,
    area_range: str = "all",
) -> Matching:
    """Match one image's detections of one class against its ground truth."""
    dets = _order_dets(list(dets), max_dets)
    gt_boxes = np.array([g.bbox.to_list() for g in gt], dtype=np.float64).reshape(-1, 4)
    det_boxes = np.array([d.bbox.to_list() for d in dets], dtype=np.float64).reshape(-1, 4)
    lo, hi = AREA_RANGES[area_range]
    gt_areas = gt_boxes[:, 2] * gt_boxes[:, 3]
    gt_ignore = (gt_areas < lo) | (gt_areas >= hi)
    ious = iou_matrix(det_boxes, gt_boxes)
    dm, di, gm = _match(ious, det_boxes[:, 2] * det_boxes[:, 3], gt_ignore, iou_t, (lo, hi))
    return Matching(np.array([d.score for d in dets], dtype=np.float64), dm, di, gm, gt_ignore)


def average_precision(matchings: Iterable[Matching]) -> float | None:
    """101-point interpolated AP pooled over images for one class/threshold.

    Returns None when the class has neither ground truth nor considered
    detections (excluded from means), 0.0 when it has detections but no
    ground truth.
    """
    scores, tps, n_gt = [], [], 0
    for m in matchings:
        keep = ~m.det_ignore
        scores.append(m.scores[keep])
        tps.append((m.det_match >= 0)[keep])
        n_gt += int(np.sum(~m.gt_ignore))
    scores_a = np.concatenate(scores) if scores else np.zeros(0)
    tp_a = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
    if n_gt == 0:
        return None if len(scores_a) == 0 else 0.0
    if len(scores_a) == 0:
        return 0.0
    order = np.argsort(-scores_a, kind="mergesort")
    tp_a = tp_a[order]
    tp_cum = np.cumsum(tp_a)
    fp_cum = np.cumsum(~tp_a)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # envelope: best precision at any recall to the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(sampled))


# -- full evaluation ----------------------------------------------------------


@dataclass
class ClassResult:
    category_id: int
    name: str
    n_gt: int
    ap_50_95: float | None
    ap_50: float | None
    ap_50_small: float | None
    ap_50_medium: float | None
    ap_50_large: float | None
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    map_50_95: float | None
    map_50: float | None
    map_50_small: float | None
    map_50_medium: float | None
    map_50_large: float | None
    per_class: list[ClassResult]
    confusion: np.ndarray
    confusion_labels: list[str]
    confusion_ids: list[int]
    ap_table: dict[float, dict[int, float | None]] = field(default_factory=dict)

    def headline(self) -> dict[str, float | None]:
        return {
            "map_50_95": self.map_50_95,
            "map_50": self.map_50,
            "map_50_small": self.map_50_small,
            "map_50_medium": self.map_50_medium,
            "map_50_large": self.map_50_large,
        }

    def to_dict(self) -> dict:
        return {
            **self.headline(),
            "per_class": [vars(r) for r in self.per_class],
            "confusion": {
                "labels": self.confusion_labels,
                "category_ids": self.confusion_ids,
                "matrix": self.confusion.astype(int).tolist(),
            },
        }


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(math.fsum(vals) / len(vals))


def _check_refs(gt_ds: DatasetIndex, dets: Sequence[Detection]) -> None:
    for d in dets:
        if d.image_id is None:
            raise DataError("evaluation needs whole-image detections (image_id missing); reproject first")
        if d.image_id not in gt_ds.image_by_id:
            raise DataError(f"detection references unknown image {d.image_id}")
        if d.category_id not in gt_ds.categories:
            raise DataError(f"detection references unknown category {d.category_id}")


def coco_map(gt_ds: DatasetIndex, dets: Sequence[Detection], cfg: EvalConfig | None = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    dets = list(dets)
    _check_refs(gt_ds, dets)
    class_ids = list(cfg.class_subset) if cfg.class_subset is not None else gt_ds.categories.ids
    for cid in class_ids:
        gt_ds.categories[cid]
    wanted = set(class_ids)

    image_ids = sorted(gt_ds.image_by_id)
    gt_by = {}
    for a in gt_ds.annotations:
        if a.category_id in wanted:
            gt_by.setdefault((a.image_id, a.category_id), []).append(a)
    det_by = {}
    for d in dets:
        if d.category_id in wanted:
            det_by.setdefault((d.image_id, d.category_id), []).append(d)

    thresholds = cfg.iou_thresholds
    t50 = 0.5 if 0.5 in thresholds else thresholds[0]
    ap_table: dict[float, dict[int, float | None]] = {t: {} for t in thresholds}
    per_class = []
    for cid in class_ids:
        runs: dict[tuple[float, str], list[Matching]] = {}
        for img_id in image_ids:
            g = gt_by.get((img_id, cid), [])
            ds_ = det_by.get((img_id, cid), [])
            if not g and not ds_:
                continue
            ds_ = _order_dets(ds_, cfg.max_dets_per_image)
            gb = np.array([a.bbox.to_list() for a in g], dtype=np.float64).reshape(-1, 4)
            db = np.array([d.bbox.to_list() for d in ds_], dtype=np.float64).reshape(-1, 4)
            ious = iou_matrix(db, gb)
            g_area = gb[:, 2] * gb[:, 3]
            d_area = db[:, 2] * db[:, 3]
            scores = np.array([d.score for d in ds_], dtype=np.float64)
            combos = [(t, "all") for t in thresholds] + [(t50, r) for r in ("small", "medium", "large")]
            for t, rng_name in combos:
                lo, hi = AREA_RANGES[rng_name]
                g_ign = (g_area < lo) | (g_area >= hi)
                dm, di, gm = _match(ious, d_area, g_ign, t, (lo, hi))
                runs.setdefault((t, rng_name), []).append(Matching(scores, dm, di, gm, g_ign))
        aps = {}
        for t in thresholds:
            aps[t] = average_precision(runs.get((t, "all"), []))
            ap_table[t][cid] = aps[t]
        base = runs.get((t50, "all"), [])
        per_class.append(
            ClassResult(
                category_id=cid,
                name=gt_ds.categories.name(cid),
                n_gt=sum(len(gt_by.get((i, cid), [])) for i in image_ids),
                ap_50_95=_mean(aps.values()) if any(v is not None for v in aps.values()) else None,
                ap_50=aps[t50],
                ap_50_small=average_precision(runs.get((t50, "small"), [])),
                ap_50_medium=average_precision(runs.get((t50, "medium"), [])),
                ap_50_large=average_precision(runs.get((t50, "large"), [])),
                tp=sum(m.tp for m in base),
                fp=sum(m.fp for m in base),
                fn=sum(m.fn for m in base),
            )
        )

    matrix, labels, ids = confusion_matrix(gt_ds, dets, cfg)
    return EvalReport(
        map_50_95=_mean(ap_table[t][c] for t in thresholds for c in class_ids),
        map_50=_mean(r.ap_50 for r in per_class),
        map_50_small=_mean(r.ap_50_small for r in per_class),
        map_50_medium=_mean(r.ap_50_medium for r in per_class),
        map_50_large=_mean(r.ap_50_large for r in per_class),
        per_class=per_class,
        confusion=matrix,
        confusion_labels=labels,
        confusion_ids=ids,
        ap_table=ap_table,
    )


def confusion_matrix(
    gt_ds: DatasetIndex, dets: Sequence[Detection], cfg: EvalConfig | None = None
) -> tuple[np.ndarray, list[str], list[int]]:
    """Class-agnostic IoU matching of confident detections against ground truth.

    Returns a ``(K+2, K+2)`` count matrix with rows = true class and columns =
    predicted class, classes ordered by descending ground-truth abundance.
    Index ``K`` is the background row/column, ``K+1`` the missed row/column;
    only ``(class, missed)`` and ``(background, class)`` cells of those are used.
    """
    cfg = cfg or EvalConfig()
    class_ids = list(cfg.class_subset) if cfg.class_subset is not None else gt_ds.categories.ids
    wanted = set(class_ids)
    gts = [a for a in gt_ds.annotations if a.category_id in wanted]
    abundance = {cid: 0 for cid in class_ids}
    for a in gts:
        abundance[a.category_id] += 1
    order = sorted(class_ids, key=lambda c: (-abundance[c], c))
    index = {cid: i for i, cid in enumerate(order)}
    K = len(order)
    bg, missed = K, K + 1
    matrix = np.zeros((K + 2, K + 2), dtype=np.int64)

    gt_by_img: dict[int, list[Annotation]] = {}
    for a in gts:
        gt_by_img.setdefault(a.image_id, []).append(a)
    det_by_img: dict[int, list[Detection]] = {}
    for d in dets:
        if d.category_id in wanted and d.score >= cfg.confusion_confidence:
            det_by_img.setdefault(d.image_id, []).append(d)

    for img_id in sorted(set(gt_by_img) | set(det_by_img)):
        g = gt_by_img.get(img_id, [])
        ds_ = _order_dets(det_by_img.get(img_id, []), len(det_by_img.get(img_id, [])))
        gb = np.array([a.bbox.to_list() for a in g], dtype=np.float64).reshape(-1, 4)
        db = np.array([d.bbox.to_list() for d in ds_], dtype=np.float64).reshape(-1, 4)
        ious = iou_matrix(db, gb)
        taken = np.zeros(len(g), dtype=bool)
        for k, d in enumerate(ds_):
            row = np.where(taken, -1.0, ious[k]) if len(g) else np.zeros(0)
            j = int(np.argmax(row)) if len(g) else -1
            if j >= 0 and row[j] >= cfg.confusion_iou:
                taken[j] = True
                matrix[index[g[j].category_id], index[d.category_id]] += 1
            else:
                matrix[bg, index[d.category_id]] += 1
        for j, a in enumerate(g):
            if not taken[j]:
                matrix[index[a.category_id], missed] += 1

    labels = [gt_ds.categories.name(c) for c in order] + ["background", "missed"]
    return matrix, labels, order


def evaluate(gt_ds: DatasetIndex, dets: Sequence[Detection], cfg: EvalConfig | None = None) -> dict[str, EvalReport]:
    """Full-class report plus the evaluation-subset report when the table defines one."""
    cfg = cfg or EvalConfig()
    out = {"all": coco_map(gt_ds, dets, replace(cfg, class_subset=None))}
    subset = cfg.class_subset or tuple(gt_ds.categories.subset_ids)
    if subset and len(subset) < len(gt_ds.categories):
        out["subset"] = coco_map(gt_ds, dets, replace(cfg, class_subset=tuple(subset)))
    return out
