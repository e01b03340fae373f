"""Dataset value types, COCO-format IO and per-class statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import DataError, DataIOError
from .geometry import BBox


class Substrate(str, Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class EnvMetadata:
    substrate: Substrate
    depth_m: float
    inclination_deg: float

    def __post_init__(self):
        object.__setattr__(self, "substrate", Substrate(self.substrate))
        if not 0.0 <= self.depth_m <= 11000.0:
            raise DataError(f"depth_m out of range [0, 11000]: {self.depth_m}")
        if not 0.0 <= self.inclination_deg <= 90.0:
            raise DataError(f"inclination_deg out of range [0, 90]: {self.inclination_deg}")


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    file_path: str
    width: float
    height: float
    metadata: EnvMetadata | None = None
    extra: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise DataError(f"image {self.image_id} has non-positive size {self.width}x{self.height}")

    @property
    def bounds(self) -> BBox:
        return BBox(0.0, 0.0, float(self.width), float(self.height))


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: BBox
    source_id: int | None = None
    extra: dict = field(default_factory=dict, compare=False, hash=False, repr=False)


@dataclass(frozen=True)
class Detection:
    """A predicted box.

    ``patch_id`` is set while the box is in patch-local coordinates and
    ``image_id`` once it refers to a whole image.
    """

    bbox: BBox
    category_id: int
    score: float
    patch_id: int | None = None
    image_id: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise DataError(f"detection score outside [0, 1]: {self.score}")


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    in_top10: bool = False
    extra: dict = field(default_factory=dict, compare=False, hash=False, repr=False)


class CategoryTable:
    """Ordered category list. ``in_top10`` marks the evaluation subset."""

    def __init__(self, entries: Iterable[Category]):
        self.entries: tuple[Category, ...] = tuple(entries)
        ids = [c.id for c in self.entries]
        names = [c.name for c in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate category ids")
        if len(set(names)) != len(names):
            raise DataError("duplicate category names")
        self._by_id = {c.id: c for c in self.entries}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, category_id) -> bool:
        return category_id in self._by_id

    def __getitem__(self, category_id: int) -> Category:
        try:
            return self._by_id[category_id]
        except KeyError:
            raise DataError(f"unknown category id {category_id}") from None

    def __eq__(self, other):
        return isinstance(other, CategoryTable) and self.entries == other.entries

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.entries]

    @property
    def subset_ids(self) -> list[int]:
        return [c.id for c in self.entries if c.in_top10]

    def name(self, category_id: int) -> str:
        return self[category_id].name

    def is_contiguous(self) -> bool:
        return sorted(self.ids) == list(range(1, len(self.entries) + 1))


# Source-dataset order; the ten most abundant classes form the 10-class evaluation subset.
WSBD_CLASSES: tuple[tuple[str, bool], ...] = (
    ("actiniarian", False),
    ("alcyonium", False),
    ("anthomastus", False),
    ("ascidian_cnemidocarpa_verrucosa", False),
    ("ascidian_distaplia", False),
    ("ascidian_pyura_bouvetensis", False),
    ("asteroidia", False),
    ("astrochlamys", True),
    ("benthic_fish", False),
    ("bryozoan", False),
    ("crinoid", False),
    ("crustaceans", True),
    ("cucumber", True),
    ("cup_coral", True),
    ("demosponges", True),
    ("echinoid", False),
    ("glass_sponge", True),
    ("gorgonian", True),
    ("hydroid_solitary", False),
    ("ophiosabine", True),
    ("ophiuroid_5_arms", True),
    ("pencil_urchin", False),
    ("pycnogonid", False),
    ("stylasterids", True),
    ("worm_tubes", False),
)


def wsbd_categories() -> CategoryTable:
    return CategoryTable(
        Category(i, name, top) for i, (name, top) in enumerate(WSBD_CLASSES, start=1)
    )


@dataclass
class DatasetIndex:
    images: list[ImageRecord]
    annotations: list[Annotation]
    categories: CategoryTable
    extra: dict = field(default_factory=dict, repr=False)

    @cached_property
    def image_by_id(self) -> dict[int, ImageRecord]:
        return {img.image_id: img for img in self.images}

    @cached_property
    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {img.image_id: [] for img in self.images}
        for ann in self.annotations:
            out.setdefault(ann.image_id, []).append(ann)
        return out

    def validate(self, check_bounds: bool = True, tol: float = 1e-6) -> "DatasetIndex":
        """Raise DataError on any broken structural invariant; returns self."""
        image_ids = [img.image_id for img in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise DataError("duplicate image ids")
        seen: set[int] = set()
        for ann in self.annotations:
            if ann.id in seen:
                raise DataError(f"duplicate annotation id {ann.id}")
            seen.add(ann.id)
            img = self.image_by_id.get(ann.image_id)
            if img is None:
                raise DataError(f"annotation {ann.id} references unknown image {ann.image_id}")
            if ann.category_id not in self.categories:
                raise DataError(f"annotation {ann.id} references unknown category {ann.category_id}")
            if check_bounds:
                b = ann.bbox
                if b.x + b.w > img.width + tol or b.y + b.h > img.height + tol:
                    raise DataError(
                        f"annotation {ann.id} bbox {b.to_list()} exceeds image {img.image_id} "
                        f"bounds {img.width}x{img.height}"
                    )
        return self

    def subset(self, image_ids: Iterable[int]) -> "DatasetIndex":
        keep = set(image_ids)
        return DatasetIndex(
            images=[img for img in self.images if img.image_id in keep],
            annotations=[a for a in self.annotations if a.image_id in keep],
            categories=self.categories,
            extra=dict(self.extra),
        )


# -- COCO IO ------------------------------------------------------------------

_IMAGE_KEYS = {"id", "file_name", "width", "height", "substrate", "depth_m", "inclination_deg"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "area", "source_id"}
_CAT_KEYS = {"id", "name", "in_top10"}
_TOP_KEYS = {"images", "annotations", "categories"}


def json_number(v: float):
    """Emit integral floats as ints so files stay tidy and stable."""
    if isinstance(v, float) and v.is_integer() and abs(v) < 2**53:
        return int(v)
    return v


def _require(record: Mapping, key: str, what: str):
    try:
        return record[key]
    except KeyError:
        raise DataError(f"{what} record missing required field {key!r}: {dict(record)!r}") from None


def dataset_from_coco(doc: Mapping[str, Any]) -> DatasetIndex:
    if not isinstance(doc, Mapping):
        raise DataError("COCO document must be a JSON object")
    images = []
    for rec in doc.get("images", []):
        meta = None
        if "substrate" in rec:
            meta = EnvMetadata(
                substrate=rec["substrate"],
                depth_m=float(_require(rec, "depth_m", "image")),
                inclination_deg=float(_require(rec, "inclination_deg", "image")),
            )
        images.append(
            ImageRecord(
                image_id=int(_require(rec, "id", "image")),
                file_path=str(rec.get("file_name", "")),
                width=float(_require(rec, "width", "image")),
                height=float(_require(rec, "height", "image")),
                metadata=meta,
                extra={k: v for k, v in rec.items() if k not in _IMAGE_KEYS},
            )
        )
    anns = []
    for rec in doc.get("annotations", []):
        src = rec.get("source_id")
        anns.append(
            Annotation(
                id=int(_require(rec, "id", "annotation")),
                image_id=int(_require(rec, "image_id", "annotation")),
                category_id=int(_require(rec, "category_id", "annotation")),
                bbox=BBox.from_list(_require(rec, "bbox", "annotation")),
                source_id=None if src is None else int(src),
                extra={k: v for k, v in rec.items() if k not in _ANN_KEYS},
            )
        )
    cats = CategoryTable(
        Category(
            id=int(_require(rec, "id", "category")),
            name=str(_require(rec, "name", "category")),
            in_top10=bool(rec.get("in_top10", False)),
            extra={k: v for k, v in rec.items() if k not in _CAT_KEYS},
        )
        for rec in doc.get("categories", [])
    )
    extra = {k: v for k, v in doc.items() if k not in _TOP_KEYS}
    return DatasetIndex(images, anns, cats, extra).validate()


def dataset_to_coco(ds: DatasetIndex) -> dict:
    images = []
    for img in ds.images:
        rec: dict[str, Any] = {
            "id": img.image_id,
            "file_name": img.file_path,
            "width": json_number(float(img.width)),
            "height": json_number(float(img.height)),
        }
        if img.metadata is not None:
            rec["substrate"] = img.metadata.substrate.value
            rec["depth_m"] = json_number(float(img.metadata.depth_m))
            rec["inclination_deg"] = json_number(float(img.metadata.inclination_deg))
        rec.update(img.extra)
        images.append(rec)
    anns = []
    for ann in ds.annotations:
        rec = {
            "id": ann.id,
            "image_id": ann.image_id,
            "category_id": ann.category_id,
            "bbox": [json_number(v) for v in ann.bbox.to_list()],
            "area": json_number(ann.bbox.area),
        }
        if ann.source_id is not None:
            rec["source_id"] = ann.source_id
        rec.update(ann.extra)
        anns.append(rec)
    cats = []
    for c in ds.categories:
        rec = {"id": c.id, "name": c.name}
        if c.in_top10:
            rec["in_top10"] = True
        rec.update(c.extra)
        cats.append(rec)
    out: dict[str, Any] = dict(ds.extra)
    out.update({"images": images, "annotations": anns, "categories": cats})
    return out


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=1, ensure_ascii=False, allow_nan=False)
            f.write("\n")
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataIOError(f"file not found: {path}") from None
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e


def load_coco(path: str | Path) -> DatasetIndex:
    return dataset_from_coco(read_json(path))


def save_coco(ds: DatasetIndex, path: str | Path) -> None:
    write_json(path, dataset_to_coco(ds))


# -- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class ClassStats:
    category_id: int
    name: str
    count: int
    min_area: float | None
    max_area: float | None
    mean_area: float | None


@dataclass(frozen=True)
class DatasetReport:
    rows: tuple[ClassStats, ...]
    total: ClassStats

    def by_name(self, name: str) -> ClassStats:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _stats(cid: int, name: str, areas: Sequence[float]) -> ClassStats:
    if not areas:
        return ClassStats(cid, name, 0, None, None, None)
    return ClassStats(cid, name, len(areas), min(areas), max(areas), math.fsum(areas) / len(areas))


def dataset_report(ds: DatasetIndex) -> DatasetReport:
    """Per-class annotation counts and box-area summaries plus a total row."""
    areas: dict[int, list[float]] = {cid: [] for cid in ds.categories.ids}
    for ann in ds.annotations:
        if ann.category_id not in areas:
            raise DataError(f"annotation {ann.id} references unknown category {ann.category_id}")
        areas[ann.category_id].append(ann.bbox.area)
    rows = tuple(_stats(c.id, c.name, areas[c.id]) for c in ds.categories)
    everything = [a for c in ds.categories for a in areas[c.id]]
    return DatasetReport(rows, _stats(0, "total", everything))
