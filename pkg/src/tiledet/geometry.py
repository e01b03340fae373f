"""Axis-aligned box algebra.

Boxes are ``(x, y, w, h)`` with a top-left anchor, the COCO interchange
convention. Corner form ``(x1, y1, x2, y2)`` is only used inside the
vectorised helpers and never leaves this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True, slots=True, order=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise DataError(f"bbox {name} is not finite: {v!r}")
        if self.x < 0 or self.y < 0:
            raise DataError(f"bbox origin must be non-negative, got ({self.x}, {self.y})")
        if self.w <= 0 or self.h <= 0:
            raise DataError(f"degenerate bbox: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(x1, y1, x2 - x1, y2 - y1)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise DataError(f"bbox needs 4 values, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def contains(self, other: "BBox") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.x + other.w <= self.x + self.w
            and other.y + other.h <= self.y + self.h
        )


def _overlap(a0: float, aw: float, b0: float, bw: float) -> float:
    # clamping to the narrower extent undoes rounding in the corner sums
    return min(min(a0 + aw, b0 + bw) - max(a0, b0), aw, bw)


def _span(a0: float, aw: float, b0: float, bw: float) -> tuple[float, float]:
    """Origin and extent of the hull of two intervals, exact when one holds the other."""
    lo, hi = min(a0, b0), max(a0 + aw, b0 + bw)
    if lo == a0 and a0 + aw >= b0 + bw:
        return a0, aw
    if lo == b0 and b0 + bw >= a0 + aw:
        return b0, bw
    return lo, hi - lo


def intersection_area(a: BBox, b: BBox) -> float:
    iw = _overlap(a.x, a.w, b.x, b.w)
    ih = _overlap(a.y, a.h, b.y, b.h)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def intersection_box(a: BBox, b: BBox) -> BBox | None:
    """Overlapping rectangle of two boxes, or None when they do not overlap."""
    x1 = max(a.x, b.x)
    y1 = max(a.y, b.y)
    x2 = min(a.x + a.w, b.x + b.w)
    y2 = min(a.y + a.h, b.y + b.h)
    if x2 <= x1 or y2 <= y1:
        return None
    return BBox(x1, y1, x2 - x1, y2 - y1)


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    if a == b:
        return 1.0
    return inter / (a.w * a.h + b.w * b.h - inter)


def union_box(a: BBox, b: BBox) -> BBox:
    """Smallest axis-aligned box containing both inputs."""
    if a == b:
        return a
    x, w = _span(a.x, a.w, b.x, b.w)
    y, h = _span(a.y, a.h, b.y, b.h)
    return BBox(x, y, w, h)


def hull(boxes: Iterable[BBox]) -> BBox:
    it = iter(boxes)
    try:
        out = next(it)
    except StopIteration:
        raise ValueError("hull of an empty box collection") from None
    for b in it:
        out = union_box(out, b)
    return out


# -- vectorised helpers -------------------------------------------------------


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an ``(n, 4)`` float array of ``x, y, w, h`` rows."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([(b.x, b.y, b.w, b.h) for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.minimum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), np.minimum(a[:, 2:3], b[:, 2]))
    ih = np.minimum(np.minimum(ay2, by2) - np.maximum(ay1, by1), np.minimum(a[:, 3:4], b[:, 3]))
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    # areas are positive, so disjoint pairs come out as exactly 0
    out = inter / ((a[:, 2:3] * a[:, 3:4]) + (b[:, 2] * b[:, 3]) - inter)
    # identical boxes score exactly 1 regardless of rounding in the union
    same = (
        (a[:, 0:1] == b[:, 0])
        & (a[:, 1:2] == b[:, 1])
        & (a[:, 2:3] == b[:, 2])
        & (a[:, 3:4] == b[:, 3])
    )
    out[same] = 1.0
    return out
