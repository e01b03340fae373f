"""Whole-image train/val/test assignment balanced on annotation counts.

Images are placed greedily, largest annotation count first, into whichever
split is furthest below its annotation target. A split that already holds
more than its fair share of an image's environmental stratum (substrate,
depth bin, inclination bin) has its claim discounted by ``penalty_weight``.
Splitting happens on whole images so overlapping patches of one image can
never land in different splits.
"""

from __future__ import annotations

import bisect
import logging
from collections import Counter
from dataclasses import dataclass, field

from .dataset import DatasetIndex, ImageRecord
from .errors import ConfigError, DataError, InfeasibleSplitError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

StratumKey = tuple[str, int, int]


@dataclass(frozen=True)
class SplitSpec:
    target_fractions: tuple[float, float, float] = (0.6871, 0.1893, 0.1236)
    depth_bins: tuple[float, ...] = (400.0, 500.0, 1000.0, 2500.0)
    inclination_bins: tuple[float, ...] = (0.0, 10.0, 45.0, 90.0)
    seed: int = 0
    penalty_weight: float = 0.25

    def __post_init__(self):
        fr = tuple(float(f) for f in self.target_fractions)
        if len(fr) != 3:
            raise ConfigError("target_fractions needs exactly three values (train, val, test)")
        if any(f <= 0 for f in fr):
            raise ConfigError(f"target fractions must be positive: {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"target fractions must sum to 1, got {sum(fr)!r}")
        object.__setattr__(self, "target_fractions", fr)
        for name in ("depth_bins", "inclination_bins"):
            edges = tuple(float(e) for e in getattr(self, name))
            if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
                raise ConfigError(f"{name} must be at least two strictly increasing edges: {edges}")
            object.__setattr__(self, name, edges)
        if not 0.0 <= self.penalty_weight <= 1.0:
            raise ConfigError(f"penalty_weight must lie in [0, 1], got {self.penalty_weight}")


@dataclass
class SplitAssignment:
    mapping: dict[int, str]
    achieved_fractions: tuple[float, float, float]
    stratum_occupancy: dict[StratumKey, dict[str, int]] = field(default_factory=dict)

    def image_ids(self, split: str) -> list[int]:
        return sorted(i for i, s in self.mapping.items() if s == split)

    def to_dict(self) -> dict:
        return {
            "splits": {s: self.image_ids(s) for s in SPLITS},
            "achieved_fractions": dict(zip(SPLITS, self.achieved_fractions)),
            "stratum_occupancy": [
                {"substrate": k[0], "depth_bin": k[1], "inclination_bin": k[2], **v}
                for k, v in sorted(self.stratum_occupancy.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        try:
            mapping = {int(i): s for s in SPLITS for i in d["splits"].get(s, [])}
        except (KeyError, AttributeError, TypeError, ValueError) as e:
            raise DataError(f"malformed split file: {e}") from e
        fr = d.get("achieved_fractions", {})
        occ = {
            (r["substrate"], int(r["depth_bin"]), int(r["inclination_bin"])): {s: int(r.get(s, 0)) for s in SPLITS}
            for r in d.get("stratum_occupancy", [])
        }
        return cls(mapping, tuple(float(fr.get(s, 0.0)) for s in SPLITS), occ)


def _bin_index(value: float, edges: tuple[float, ...], what: str) -> int:
    n_bins = len(edges) - 1
    if value < edges[0] or value > edges[-1]:
        log.warning("%s %.3f outside bin edges %s; clamped", what, value, edges)
    # a value sitting on an edge belongs to the bin above it
    idx = bisect.bisect_right(edges, value) - 1
    return min(max(idx, 0), n_bins - 1)


def stratum_key(img: ImageRecord, spec: SplitSpec) -> StratumKey:
    if img.metadata is None:
        raise DataError(f"image {img.image_id} has no environment metadata to stratify on")
    m = img.metadata
    return (
        m.substrate.value,
        _bin_index(m.depth_m, spec.depth_bins, "depth"),
        _bin_index(m.inclination_deg, spec.inclination_bins, "inclination"),
    )


def _fractions(counts: dict[str, int]) -> tuple[float, float, float]:
    total = sum(counts.values())
    if total == 0:
        return (0.0, 0.0, 0.0)
    return tuple(counts[s] / total for s in SPLITS)


def stratified_split(ds: DatasetIndex, spec: SplitSpec) -> SplitAssignment:
    """Greedy largest-first assignment of whole images to splits.

    Fully deterministic: ties in annotation count are broken by image id and
    ties in split score by split order. ``spec.seed`` is carried for
    provenance only.
    """
    if len(ds.images) < len(SPLITS):
        raise InfeasibleSplitError(
            f"need at least {len(SPLITS)} images to fill {len(SPLITS)} splits, got {len(ds.images)}"
        )
    per_image = {img.image_id: len(ds.annotations_by_image.get(img.image_id, [])) for img in ds.images}
    total = sum(per_image.values())
    if total == 0:
        raise InfeasibleSplitError("dataset has no annotations to balance on")

    keys = {img.image_id: stratum_key(img, spec) for img in ds.images}
    stratum_share = {k: n / len(ds.images) for k, n in Counter(keys.values()).items()}
    targets = dict(zip(SPLITS, spec.target_fractions))

    ann_counts = {s: 0 for s in SPLITS}
    img_counts = {s: 0 for s in SPLITS}
    occupancy: dict[StratumKey, dict[str, int]] = {}
    mapping: dict[int, str] = {}

    for image_id in sorted(per_image, key=lambda i: (-per_image[i], i)):
        key = keys[image_id]
        occ = occupancy.setdefault(key, {s: 0 for s in SPLITS})
        best, best_score = None, None
        for s in SPLITS:
            deficit = (targets[s] * total - ann_counts[s]) / total
            over = img_counts[s] > 0 and occ[s] / img_counts[s] > stratum_share[key]
            score = deficit - spec.penalty_weight * abs(deficit) if over else deficit
            if best_score is None or score > best_score:
                best, best_score = s, score
        mapping[image_id] = best
        ann_counts[best] += per_image[image_id]
        img_counts[best] += 1
        occ[best] += 1

    achieved = _fractions(ann_counts)
    log.info("split achieved fractions %s", ", ".join(f"{s}={f:.4f}" for s, f in zip(SPLITS, achieved)))
    return SplitAssignment(mapping, achieved, occupancy)


@dataclass
class SplitReport:
    achieved_fractions: tuple[float, float, float]
    annotation_counts: dict[str, int]
    class_presence: dict[int, dict[str, int]]
    stratum_images: dict[StratumKey, dict[str, int]]
    warnings: list[str]

    def to_dict(self) -> dict:
        return {
            "achieved_fractions": dict(zip(SPLITS, self.achieved_fractions)),
            "annotation_counts": self.annotation_counts,
            "class_presence": {str(k): v for k, v in sorted(self.class_presence.items())},
            "stratum_images": [
                {"substrate": k[0], "depth_bin": k[1], "inclination_bin": k[2], **v}
                for k, v in sorted(self.stratum_images.items())
            ],
            "warnings": self.warnings,
        }


def validate_split(ds: DatasetIndex, a: SplitAssignment, spec: SplitSpec | None = None) -> SplitReport:
    for img in ds.images:
        if img.image_id not in a.mapping:
            raise DataError(f"image {img.image_id} is not assigned to any split")
        if a.mapping[img.image_id] not in SPLITS:
            raise DataError(f"image {img.image_id} assigned to unknown split {a.mapping[img.image_id]!r}")

    counts = {s: 0 for s in SPLITS}
    presence = {cid: {s: 0 for s in SPLITS} for cid in ds.categories.ids}
    for ann in ds.annotations:
        s = a.mapping[ann.image_id]
        counts[s] += 1
        presence.setdefault(ann.category_id, {x: 0 for x in SPLITS})[s] += 1

    strata: dict[StratumKey, dict[str, int]] = {}
    if spec is not None:
        for img in ds.images:
            if img.metadata is None:
                continue
            row = strata.setdefault(stratum_key(img, spec), {s: 0 for s in SPLITS})
            row[a.mapping[img.image_id]] += 1

    warnings = []
    for cid, row in sorted(presence.items()):
        if sum(row.values()) and row["train"] == 0:
            name = ds.categories.name(cid) if cid in ds.categories else str(cid)
            warnings.append(f"class {name} ({cid}) is absent from train")
    for w in warnings:
        log.warning(w)
    return SplitReport(_fractions(counts), counts, presence, strata, warnings)
