"""Patch-level detection backends and the detections file format.

No neural network runs here. :class:`FileBackend` replays detections
produced by an external model runner; :class:`OracleBackend` derives them
from ground truth with optional, seeded corruption so the rest of the
pipeline can be exercised and scored end to end.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Detection, json_number, read_json, write_json
from .errors import ConfigError, DataError, MissingDetectionsError, TiledetError
from .geometry import BBox, iou
from .slicer import PatchRecord

log = logging.getLogger(__name__)


class DetectorBackend(ABC):
    name: str = "backend"
    patch_size: tuple[int, int] | None = None
    # the pipeline only fans out across workers when this is True
    thread_safe: bool = True

    @abstractmethod
    def detect(self, patch: PatchRecord, raster: np.ndarray | None = None) -> list[Detection]:
        """Detections for one patch in patch-local coordinates."""


class ScoreModel(str, Enum):
    CONSTANT_1 = "constant_1"
    IOU_WITH_TRUTH = "iou_with_truth"


@dataclass(frozen=True)
class OracleConfig:
    """Corruption knobs for :class:`OracleBackend`.

    ``jitter_px`` moves each box corner independently by ``U(-j, j)`` pixels.
    ``quantize`` snaps box edges to the integer pixel grid of the raster the
    oracle is pretending to look at: each edge moves to the nearest pixel
    boundary, so an object that covers no pixel by majority in some
    direction collapses to zero width and goes undetected.
    """

    drop_rate: float = 0.0
    jitter_px: float = 0.0
    confusion_rate: float = 0.0
    score_model: ScoreModel = ScoreModel.CONSTANT_1
    seed: int = 0
    quantize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "score_model", ScoreModel(self.score_model))
        for name in ("drop_rate", "confusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.jitter_px < 0:
            raise ConfigError(f"jitter_px must be non-negative, got {self.jitter_px}")


def _snap(x1: float, x2: float, limit: float) -> tuple[float, float]:
    a = min(max(float(math.floor(x1 + 0.5)), 0.0), float(math.floor(limit)))
    b = min(max(float(math.floor(x2 + 0.5)), 0.0), float(math.floor(limit)))
    return a, b


class OracleBackend(DetectorBackend):
    name = "oracle"

    def __init__(self, config: OracleConfig, category_ids: Sequence[int]):
        self.config = config
        self.category_ids = sorted(category_ids)

    def detect(self, patch: PatchRecord, raster: np.ndarray | None = None) -> list[Detection]:
        cfg = self.config
        rng = np.random.default_rng([int(cfg.seed), int(patch.patch_id)])
        W, H = patch.width, patch.height
        out = []
        for ann in patch.annotations:
            # draw every random number unconditionally so one knob never shifts another's stream
            drop_u = rng.random()
            noise = rng.uniform(-cfg.jitter_px, cfg.jitter_px, 4) if cfg.jitter_px > 0 else np.zeros(4)
            conf_u = rng.random()
            other_u = rng.random()
            b = ann.bbox
            if drop_u < cfg.drop_rate:
                continue
            x1 = min(max(b.x + noise[0], 0.0), W)
            y1 = min(max(b.y + noise[1], 0.0), H)
            x2 = min(max(b.x + b.w + noise[2], 0.0), W)
            y2 = min(max(b.y + b.h + noise[3], 0.0), H)
            if x2 < x1:
                x1, x2 = x2, x1
            if y2 < y1:
                y1, y2 = y2, y1
            if cfg.quantize:
                x1, x2 = _snap(x1, x2, W)
                y1, y2 = _snap(y1, y2, H)
            if x2 - x1 <= 0 or y2 - y1 <= 0:
                continue
            box = BBox(x1, y1, x2 - x1, y2 - y1)
            cid = ann.category_id
            others = [c for c in self.category_ids if c != cid]
            if others and conf_u < cfg.confusion_rate:
                cid = others[int(other_u * len(others))]
            if cfg.score_model is ScoreModel.CONSTANT_1:
                score = 1.0
            else:
                score = iou(box, b)
            out.append(Detection(box, cid, score, patch_id=patch.patch_id))
        return out


class FileBackend(DetectorBackend):
    """Replays a detections file.

    A patch with no records is an error unless the file listed it under
    ``patch_ids`` (object form) or ``strict`` is off.
    """

    name = "file"

    def __init__(self, detections: Iterable[Detection], known_patches: Iterable[int] = (), strict: bool = True):
        self.by_patch: dict[int, list[Detection]] = {}
        for d in detections:
            if d.patch_id is None:
                raise DataError("file backend needs patch-local detections (patch_id missing)")
            self.by_patch.setdefault(d.patch_id, []).append(d)
        for pid in known_patches:
            self.by_patch.setdefault(int(pid), [])
        self.strict = strict

    @classmethod
    def from_file(cls, path: str | Path, strict: bool = True) -> "FileBackend":
        doc = read_json(path)
        known: list[int] = []
        if isinstance(doc, dict):
            known = [int(p) for p in doc.get("patch_ids", [])]
            doc = doc.get("detections", [])
        return cls(detections_from_records(doc), known, strict)

    def detect(self, patch: PatchRecord, raster: np.ndarray | None = None) -> list[Detection]:
        dets = self.by_patch.get(patch.patch_id)
        if dets is None:
            if self.strict:
                raise MissingDetectionsError(patch.patch_id)
            return []
        return list(dets)


def detect_patch(backend: DetectorBackend, patch: PatchRecord, raster: np.ndarray | None = None) -> list[Detection]:
    dets = backend.detect(patch, raster)
    out = []
    for d in dets:
        if d.patch_id != patch.patch_id:
            d = Detection(d.bbox, d.category_id, d.score, patch_id=patch.patch_id)
        out.append(d)
    return out


def sort_detections(dets: Iterable[Detection]) -> list[Detection]:
    """Order by patch (or image) id, then score descending, then box."""
    return sorted(
        dets,
        key=lambda d: (
            d.patch_id if d.patch_id is not None else -1,
            d.image_id if d.image_id is not None else -1,
            -d.score,
            d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h,
            d.category_id,
        ),
    )


def run_inference(
    patches: Sequence[PatchRecord],
    backend: DetectorBackend,
    workers: int = 1,
    load_raster=None,
) -> list[Detection]:
    """Run ``backend`` over every patch; patches are independent of each other."""

    def one(patch: PatchRecord) -> list[Detection]:
        raster = load_raster(patch) if load_raster is not None else None
        try:
            return detect_patch(backend, patch, raster)
        except TiledetError:
            raise
        except Exception as e:
            raise DataError(f"backend {backend.name} failed on patch {patch.patch_id}: {e}") from e

    if workers > 1 and backend.thread_safe:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, patches))
    else:
        chunks = [one(p) for p in patches]
    return sort_detections(d for chunk in chunks for d in chunk)


# -- file format --------------------------------------------------------------


def detection_to_record(d: Detection) -> dict:
    rec: dict = {}
    if d.patch_id is not None:
        rec["patch_id"] = d.patch_id
    if d.image_id is not None:
        rec["image_id"] = d.image_id
    rec["category_id"] = d.category_id
    rec["bbox"] = [json_number(v) for v in d.bbox.to_list()]
    rec["score"] = json_number(d.score)
    return rec


def detections_from_records(records: Sequence[dict]) -> list[Detection]:
    if not isinstance(records, list):
        raise DataError("detections file must hold a JSON array of records")
    out = []
    for rec in records:
        try:
            pid = rec.get("patch_id")
            img = rec.get("image_id")
            out.append(
                Detection(
                    bbox=BBox.from_list(rec["bbox"]),
                    category_id=int(rec["category_id"]),
                    score=float(rec["score"]),
                    patch_id=None if pid is None else int(pid),
                    image_id=None if img is None else int(img),
                )
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            if isinstance(e, DataError):
                raise
            raise DataError(f"bad detection record {rec!r}: {e}") from e
    return out


def save_detections(path: str | Path, dets: Iterable[Detection]) -> None:
    write_json(path, [detection_to_record(d) for d in dets])


def load_detections(path: str | Path) -> list[Detection]:
    doc = read_json(path)
    if isinstance(doc, dict):
        doc = doc.get("detections", [])
    return detections_from_records(doc)
