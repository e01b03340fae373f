"""End-to-end orchestration: split, slice, augment, infer, merge, evaluate.

Every stage reads and writes plain files so it can also be run on its own
from the command line. Output trees carry no timestamps and no worker
counts, so rerunning a configuration reproduces them byte for byte.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping

import yaml

from .augment import AugmentationSpec, Strategy, augment_patch, augmented_file_name
from .dataset import DatasetIndex, Detection, ImageRecord, load_coco, read_json, save_coco, write_json
from .detector import (
    DetectorBackend, FileBackend, OracleBackend, OracleConfig, run_inference,
    save_detections,
)
from .errors import ConfigError, DataError, DataIOError, TiledetError
from .evaluator import EvalConfig, EvalReport, evaluate
from .geometry import BBox
from .postprocess import PostprocessConfig, flatten, postprocess_pipeline
from .raster import read_image, write_png
from .report import write_eval_report
from .slicer import (
    Manifest, PatchRecord, SliceConfig, manifest_from_list, manifest_to_list, patch_records_from_dataset,
    scale_annotations, slice_dataset,
)
from .splitter import SPLITS, SplitAssignment, SplitSpec, stratified_split, validate_split

log = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"
BACKENDS = ("oracle", "file")
EVAL_SPLITS = SPLITS + ("all",)


# -- configuration -------------------------------------------------------------


def _jsonable(v: Any) -> Any:
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def config_hash(obj: Mapping) -> str:
    canon = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_config(cls, d: Mapping | None, what: str, **defaults):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {what} option(s): {', '.join(unknown)}")
    for k, v in defaults.items():
        d.setdefault(k, v)
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {what} options: {e}") from e


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "oracle"
    oracle: OracleConfig = field(default_factory=OracleConfig)
    detections: str | None = None

    def __post_init__(self):
        if self.kind not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.kind!r}")
        if self.kind == "file" and not self.detections:
            raise ConfigError("file backend needs a detections path")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one pipeline run needs.

    ``seed`` seeds the split, the augmentation and the oracle unless their
    own sections set one. ``images`` may be omitted, in which case the run
    works on annotations only and no pixels are sliced or augmented.
    """

    dataset: str
    output: str
    images: str | None = None
    seed: int = 0
    slice: SliceConfig = field(default_factory=SliceConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(strategy=Strategy.NONE))
    backend: BackendConfig = field(default_factory=BackendConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    eval_split: str = "test"
    write_patches: bool = True
    figures: bool = True

    def __post_init__(self):
        if self.eval_split not in EVAL_SPLITS:
            raise ConfigError(f"eval_split must be one of {EVAL_SPLITS}, got {self.eval_split!r}")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> "PipelineConfig":
        d = dict(d)
        top = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - top)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for k in ("dataset", "output"):
            if not d.get(k):
                raise ConfigError(f"config needs '{k}'")
        base = Path(base_dir) if base_dir is not None else None

        def where(p):
            if p is None:
                return None
            p = Path(p)
            return str(base / p if base is not None and not p.is_absolute() else p)

        seed = int(d.get("seed", 0))
        be = dict(d.get("backend") or {})
        kind = be.pop("kind", "oracle")
        dets_path = where(be.pop("detections", None))
        backend = BackendConfig(kind, build_config(OracleConfig, be, "oracle", seed=seed), dets_path)
        aug = dict(d.get("augment") or {})
        aug.setdefault("strategy", "none")
        return cls(
            dataset=where(d["dataset"]),
            output=where(d["output"]),
            images=where(d.get("images")),
            seed=seed,
            slice=build_config(SliceConfig, d.get("slice"), "slice"),
            split=build_config(SplitSpec, d.get("split"), "split", seed=seed),
            augment=build_config(AugmentationSpec, aug, "augment", seed=seed),
            backend=backend,
            postprocess=build_config(PostprocessConfig, d.get("postprocess"), "postprocess"),
            eval=build_config(EvalConfig, d.get("eval"), "eval"),
            eval_split=d.get("eval_split", "test"),
            write_patches=bool(d.get("write_patches", True)),
            figures=bool(d.get("figures", True)),
        )

    def to_dict(self) -> dict:
        """Resolved configuration. The output location is left out so that
        identical runs into different directories produce identical trees."""
        d = _jsonable(asdict(self))
        d.pop("output")
        return d

    def check_paths(self) -> None:
        if not Path(self.dataset).is_file():
            raise DataIOError(f"dataset not found: {self.dataset}")
        if self.images is not None and not Path(self.images).is_dir():
            raise DataIOError(f"image directory not found: {self.images}")
        if self.backend.kind == "file" and not Path(self.backend.detections).is_file():
            raise DataIOError(f"detections file not found: {self.backend.detections}")


def load_config_file(path: str | Path) -> dict:
    """Read a JSON or YAML configuration file into a plain dict."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return doc


def load_config(path: str | Path, overrides: Mapping | None = None) -> PipelineConfig:
    doc = load_config_file(path)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        sect, _, key = k.partition(".")
        if key:
            doc.setdefault(sect, {})
            doc[sect] = dict(doc[sect] or {}, **{key: v})
        else:
            doc[sect] = v
    return PipelineConfig.from_dict(doc, base_dir=Path(path).parent)


# -- provenance -----------------------------------------------------------------


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digests(root: str | Path, exclude: tuple[str, ...] = ()) -> dict[str, str]:
    """sha256 of every file under ``root``, keyed by POSIX relative path."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel not in exclude:
            out[rel] = file_digest(p)
    return out


def tree_hash(root: str | Path) -> str:
    h = hashlib.sha256()
    for rel, digest in tree_digests(root).items():
        h.update(f"{rel}\0{digest}\n".encode())
    return h.hexdigest()


def write_run_manifest(out_dir: str | Path, command: str, config: Mapping, seed: int | None,
                       stages: list[str] | None = None) -> None:
    out_dir = Path(out_dir)
    write_json(out_dir / "resolved_config.json", _jsonable(config))
    doc = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": seed,
        "stages": stages or [command],
        "outputs": tree_digests(out_dir, exclude=(RUN_MANIFEST,)),
    }
    write_json(out_dir / RUN_MANIFEST, doc)


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag any toolkit error escaping the block with the stage it came from."""
    log.info("stage %s", name)
    try:
        yield
    except TiledetError as e:
        if not hasattr(e, "stage"):
            e.stage = name
        raise
    except OSError as e:
        err = DataIOError(str(e))
        err.stage = name
        raise err from e


# -- stage helpers ---------------------------------------------------------------


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    write_json(path, manifest_to_list(manifest))


def load_manifest(path: str | Path) -> Manifest:
    doc = read_json(path)
    if not isinstance(doc, list):
        raise DataError(f"manifest {path} must hold a JSON array")
    return manifest_from_list(doc)


def save_split(path: str | Path, a: SplitAssignment) -> None:
    write_json(path, a.to_dict())


def load_split(path: str | Path) -> SplitAssignment:
    return SplitAssignment.from_dict(read_json(path))


def write_sliced(out_dir: Path, patched: DatasetIndex, manifest: Manifest) -> None:
    save_coco(patched, out_dir / "dataset.json")
    save_manifest(out_dir / "manifest.json", manifest)


def make_backend(cfg: BackendConfig, categories) -> DetectorBackend:
    if cfg.kind == "file":
        return FileBackend.from_file(cfg.detections)
    return OracleBackend(cfg.oracle, categories.ids)


def materialize_augmented(
    patched: DatasetIndex,
    manifest: Manifest,
    patch_dir: str | Path,
    out_dir: str | Path,
    spec: AugmentationSpec,
    workers: int = 1,
) -> DatasetIndex:
    """Write one augmented copy of every patch plus its COCO file.

    Augmented file names carry the seed so copies from different seeds can
    share a directory.
    """
    patch_dir, out_dir = Path(patch_dir), Path(out_dir)
    records = patch_records_from_dataset(patched, manifest)
    by_id = patched.image_by_id

    def one(rec: PatchRecord):
        img = by_id[rec.patch_id]
        raster, anns = augment_patch(rec, read_image(patch_dir / img.file_path), spec)
        name = augmented_file_name(img.file_path, spec.seed)
        write_png(out_dir / "images" / name, raster)
        h, w = raster.shape[:2]
        return ImageRecord(img.image_id, name, w, h, img.metadata, dict(img.extra)), anns

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]
    aug = DatasetIndex(
        images=[r[0] for r in results],
        annotations=[a for r in results for a in r[1]],
        categories=patched.categories,
        extra=dict(patched.extra),
    )
    save_coco(aug, out_dir / "dataset.json")
    return aug


def whole_image_baseline(
    gt: DatasetIndex,
    factor: float,
    oracle: OracleConfig,
    cfg: EvalConfig | None = None,
) -> dict[str, EvalReport]:
    """Whole-image detection on ``factor``-times downscaled images.

    Ground truth is shrunk with the image, the oracle reads it off the
    coarse pixel grid, and its boxes are scaled back up and scored against
    full-resolution ground truth.
    """
    if factor < 1:
        raise ConfigError(f"downscale factor must be at least 1, got {factor}")
    backend = OracleBackend(replace(oracle, quantize=True), gt.categories.ids)
    dets = []
    for img in sorted(gt.images, key=lambda im: im.image_id):
        w, h = max(int(round(img.width / factor)), 1), max(int(round(img.height / factor)), 1)
        sx, sy = w / img.width, h / img.height
        small = scale_annotations(gt.annotations_by_image.get(img.image_id, []), sx, sy, bounds=(w, h))
        rec = PatchRecord(img.image_id, img.image_id, 0.0, 0.0, float(w), float(h), tuple(small))
        for d in backend.detect(rec):
            b = d.bbox
            x1, y1 = b.x / sx, b.y / sy
            x2, y2 = min(b.x2 / sx, img.width), min(b.y2 / sy, img.height)
            dets.append(Detection(BBox(x1, y1, x2 - x1, y2 - y1), d.category_id, d.score, image_id=img.image_id))
    return evaluate(gt, dets, cfg)


def gt_for_split(ds: DatasetIndex, a: SplitAssignment | None, split: str) -> DatasetIndex:
    if split == "all" or a is None:
        return ds
    return ds.subset(a.image_ids(split))


# -- full pipeline ----------------------------------------------------------------


@dataclass
class PipelineResult:
    reports: dict[str, EvalReport]
    split: SplitAssignment
    n_patches: dict[str, int]
    n_detections: int
    n_merged: int
    output: Path


def run_pipeline(cfg: PipelineConfig, workers: int = 1) -> PipelineResult:
    """Run every stage and persist its artifacts under ``cfg.output``.

    Layout::

        split.json, split_report.json
        patches/{train,val,test}/dataset.json, manifest.json, images/
        augmented/train/                      (when an augmentation strategy is set)
        detections/patch_detections.json, merged.json
        eval/                                 (report text, CSV, JSON, figures)
        resolved_config.json, run_manifest.json
    """
    out = Path(cfg.output)
    with stage("config"):
        cfg.check_paths()
        out.mkdir(parents=True, exist_ok=True)
    with stage("load"):
        ds = load_coco(cfg.dataset).validate()

    with stage("split"):
        assignment = stratified_split(ds, cfg.split)
        save_split(out / "split.json", assignment)
        write_json(out / "split_report.json", validate_split(ds, assignment, cfg.split).to_dict())

    stages = ["config", "load", "split", "slice"]
    sliced: dict[str, tuple[DatasetIndex, Manifest, list[PatchRecord]]] = {}
    with stage("slice"):
        pixels = cfg.images is not None and cfg.write_patches
        next_pid = 1
        for split in SPLITS:
            part = ds.subset(assignment.image_ids(split))
            pdir = out / "patches" / split
            result = slice_dataset(
                part, cfg.slice,
                image_dir=cfg.images if pixels else None,
                out_dir=pdir / "images" if pixels else None,
                workers=workers,
                first_patch_id=next_pid,
            )
            next_pid += len(result[2])
            write_sliced(pdir, result[0], result[1])
            sliced[split] = result

    if cfg.augment.strategy is not Strategy.NONE:
        stages.append("augment")
        with stage("augment"):
            if not pixels:
                log.warning("augmentation skipped: no patch rasters were written")
            else:
                patched, manifest, _ = sliced["train"]
                materialize_augmented(patched, manifest, out / "patches" / "train" / "images",
                                      out / "augmented" / "train", cfg.augment, workers)

    eval_splits = SPLITS if cfg.eval_split == "all" else (cfg.eval_split,)
    stages += ["infer", "merge", "eval"]
    with stage("infer"):
        backend = make_backend(cfg.backend, ds.categories)
        records = [r for s in eval_splits for r in sliced[s][2]]
        patch_dets = run_inference(records, backend, workers=workers)
        save_detections(out / "detections" / "patch_detections.json", patch_dets)

    with stage("merge"):
        manifest: Manifest = {}
        for s in eval_splits:
            manifest.update(sliced[s][1])
        merged = flatten(postprocess_pipeline(patch_dets, manifest, cfg.postprocess, workers=workers))
        save_detections(out / "detections" / "merged.json", merged)

    with stage("eval"):
        gt = gt_for_split(ds, assignment, cfg.eval_split)
        reports = evaluate(gt, merged, cfg.eval)
        write_eval_report(out / "eval", reports, figures=cfg.figures)

    write_run_manifest(out, "pipeline", cfg.to_dict(), cfg.seed, stages)
    return PipelineResult(
        reports=reports,
        split=assignment,
        n_patches={s: len(sliced[s][2]) for s in SPLITS},
        n_detections=len(patch_dets),
        n_merged=len(merged),
        output=out,
    )
