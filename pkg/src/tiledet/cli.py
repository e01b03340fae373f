"""Command-line interface.

Each subcommand wraps one module operation, reads and writes files only,
and leaves ``resolved_config.json`` and ``run_manifest.json`` beside its
outputs. Errors go to stderr as one JSON line; the exit status is 2 for
configuration errors, 3 for data errors and 4 for file IO errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from .augment import AugmentationSpec
from .dataset import dataset_report, load_coco, write_json, wsbd_categories
from .detector import FileBackend, OracleBackend, OracleConfig, load_detections, run_inference, save_detections
from .errors import ConfigError, DataError, TiledetError
from .evaluator import EvalConfig, evaluate
from .pipeline import (
    BackendConfig, PipelineConfig, build_config, gt_for_split, load_config, load_config_file, load_manifest,
    load_split, materialize_augmented, run_pipeline, save_split, write_run_manifest, write_sliced,
)
from .postprocess import PostprocessConfig, flatten, postprocess_pipeline
from .raster import read_image, write_png
from .render import render_detections
from .report import format_table, write_dataset_report, write_eval_report
from .slicer import SliceConfig, compute_patch_grid, patch_records_from_dataset, slice_dataset
from .splitter import SPLITS, SplitSpec, stratified_split, validate_split
from .synth import SynthSpec, write_synthetic

log = logging.getLogger("tiledet")


def _section(args, name: str, flags: Mapping[str, Any]) -> dict:
    """Config-file section overlaid with any flags given on the command line."""
    base = {}
    if getattr(args, "config", None):
        doc = load_config_file(args.config)
        base = dict(doc.get(name) or {})
        if "seed" in doc and name in ("split", "augment", "backend"):
            base.setdefault("seed", doc["seed"])
    base.update({k: v for k, v in flags.items() if v is not None})
    return base


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inputs(**paths) -> dict:
    return {k: (str(v) if v is not None else None) for k, v in paths.items()}


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_doc = load_config_file(args.spec) if args.spec else {}
    if args.n_images is not None:
        spec_doc["n_images"] = args.n_images
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(spec_doc)
    except TypeError as e:
        raise ConfigError(f"bad synth spec: {e}") from e
    out = _out(args)
    ds = write_synthetic(spec, out, write_images=not args.no_images)
    write_run_manifest(out, "synth", {"spec": spec_doc, "images": not args.no_images}, spec.seed)
    print(f"{len(ds.images)} images, {len(ds.annotations)} annotations -> {out}")
    return 0


def cmd_stats(args) -> int:
    ds = load_coco(args.dataset).validate()
    rep = dataset_report(ds)
    out = _out(args)
    write_dataset_report(out / "class_stats.csv", rep)
    write_run_manifest(out, "stats", _inputs(dataset=args.dataset), None)
    for r in (*rep.rows, rep.total):
        print(f"{r.name:<20} {r.count:>7}")
    return 0


def cmd_split(args) -> int:
    spec = build_config(SplitSpec, _section(args, "split", {"seed": args.seed}), "split")
    ds = load_coco(args.dataset).validate()
    a = stratified_split(ds, spec)
    out = _out(args)
    save_split(out / "split.json", a)
    report = validate_split(ds, a, spec)
    write_json(out / "split_report.json", report.to_dict())
    write_run_manifest(out, "split", {"split": asdict(spec), **_inputs(dataset=args.dataset)}, spec.seed)
    for w in report.warnings:
        log.warning(w)
    print(" ".join(f"{s}={f:.4f}" for s, f in zip(SPLITS, a.achieved_fractions)))
    return 0


def cmd_slice(args) -> int:
    cfg = build_config(SliceConfig, _section(args, "slice", {
        "patch_w": args.patch_w, "patch_h": args.patch_h,
        "overlap": args.overlap, "min_visibility": args.min_visibility,
    }), "slice")
    ds = load_coco(args.dataset).validate()
    if args.split_file:
        ds = gt_for_split(ds, load_split(args.split_file), args.which)
    out = _out(args)
    patched, manifest, records = slice_dataset(
        ds, cfg, image_dir=args.images, out_dir=out / "images" if args.images else None, workers=args.workers,
    )
    write_sliced(out, patched, manifest)
    predicted = sum(len(compute_patch_grid(img, cfg)) for img in ds.images)
    if predicted != len(records):
        raise DataError(f"sliced {len(records)} patches, grid predicts {predicted}")
    write_run_manifest(out, "slice", {
        "slice": asdict(cfg), "which": args.which if args.split_file else "all",
        **_inputs(dataset=args.dataset, images=args.images, split=args.split_file),
    }, None)
    print(f"{len(records)} patches from {len(ds.images)} images -> {out}")
    return 0


def cmd_augment(args) -> int:
    spec = build_config(AugmentationSpec, _section(args, "augment", {
        "strategy": args.strategy, "probability": args.probability, "seed": args.seed,
    }), "augment")
    pdir = Path(args.patches)
    patched = load_coco(pdir / "dataset.json")
    manifest = load_manifest(pdir / "manifest.json")
    out = _out(args)
    aug = materialize_augmented(patched, manifest, pdir / "images", out, spec, workers=args.workers)
    write_run_manifest(out, "augment", {"augment": asdict(spec), **_inputs(patches=args.patches)}, spec.seed)
    print(f"{len(aug.images)} augmented patches -> {out}")
    return 0


def cmd_infer(args) -> int:
    sect = _section(args, "backend", {
        "kind": args.backend, "detections": args.detections, "drop_rate": args.drop_rate,
        "jitter_px": args.jitter_px, "confusion_rate": args.confusion_rate,
        "score_model": args.score_model, "seed": args.seed,
    })
    kind = sect.pop("kind", "oracle")
    dets_path = sect.pop("detections", None)
    oracle = build_config(OracleConfig, sect, "oracle")
    be = BackendConfig(kind, oracle, dets_path)
    pdir = Path(args.patches)
    patched = load_coco(pdir / "dataset.json")
    manifest = load_manifest(pdir / "manifest.json")
    patches = patch_records_from_dataset(patched, manifest)
    backend = FileBackend.from_file(dets_path) if kind == "file" else OracleBackend(oracle, patched.categories.ids)
    dets = run_inference(patches, backend, workers=args.workers)
    out = _out(args)
    save_detections(out / "detections.json", dets)
    write_run_manifest(out, "infer", {"backend": asdict(be), **_inputs(patches=args.patches)}, oracle.seed)
    print(f"{len(dets)} detections on {len(patches)} patches -> {out}")
    return 0


def cmd_merge(args) -> int:
    cfg = build_config(PostprocessConfig, _section(args, "postprocess", {
        "mode": args.mode, "iou_threshold": args.iou_threshold,
        "class_agnostic": True if args.class_agnostic else None,
    }), "postprocess")
    dets = load_detections(args.detections)
    manifest = load_manifest(args.manifest)
    merged = flatten(postprocess_pipeline(dets, manifest, cfg, workers=args.workers))
    out = _out(args)
    save_detections(out / "detections.json", merged)
    write_run_manifest(out, "merge", {
        "postprocess": asdict(cfg), **_inputs(detections=args.detections, manifest=args.manifest),
    }, None)
    print(f"{len(dets)} -> {len(merged)} detections ({cfg.mode.value}) -> {out}")
    return 0


def cmd_eval(args) -> int:
    sect = _section(args, "eval", {"confusion_confidence": args.confidence})
    cfg = build_config(EvalConfig, sect, "eval")
    gt = load_coco(args.dataset).validate()
    if args.split_file:
        gt = gt_for_split(gt, load_split(args.split_file), args.which)
    dets = load_detections(args.detections)
    reports = evaluate(gt, dets, cfg)
    out = _out(args)
    write_eval_report(out, reports, figures=not args.no_figures)
    write_run_manifest(out, "eval", {
        "eval": asdict(cfg), "which": args.which if args.split_file else "all",
        **_inputs(dataset=args.dataset, detections=args.detections, split=args.split_file),
    }, None)
    sys.stdout.write(format_table(reports))
    return 0


def cmd_render(args) -> int:
    raster = read_image(args.image)
    cats = load_coco(args.dataset).categories if args.dataset else wsbd_categories()
    image_id = args.image_id
    if image_id is None and args.dataset:
        ds = load_coco(args.dataset)
        hits = [im.image_id for im in ds.images if Path(im.file_path).name == Path(args.image).name]
        image_id = hits[0] if hits else None
    dets = load_detections(args.detections)
    if image_id is not None:
        dets = [d for d in dets if d.image_id == image_id]
    names = {c.id: c.name for c in cats}
    out = render_detections(raster, dets, names, confidence_threshold=args.threshold)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, out)
    print(f"drew {sum(d.score >= args.threshold for d in dets)} boxes -> {args.out}")
    return 0


def cmd_pipeline(args) -> int:
    overrides = {
        "output": args.out, "seed": args.seed, "postprocess.mode": args.mode,
        "postprocess.iou_threshold": args.iou_threshold, "augment.strategy": args.strategy,
    }
    cfg: PipelineConfig = load_config(args.config, overrides)
    result = run_pipeline(cfg, workers=args.workers)
    sys.stdout.write(format_table(result.reports))
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tiledet", description="Tiled detection toolkit for large seafloor images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON or YAML config; flags override its values")
        sp.add_argument("--workers", type=int, default=1, help="worker threads; outputs never depend on it")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic dataset")
    sp.add_argument("--spec", help="JSON or YAML synthetic spec")
    sp.add_argument("--n-images", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--no-images", action="store_true", help="annotations only")
    sp.add_argument("--out", required=True)

    sp = add("stats", cmd_stats, "per-class annotation statistics")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)

    sp = add("split", cmd_split, "stratified train/val/test split of whole images")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("slice", cmd_slice, "cut images and annotations into overlapping patches")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--images", help="directory of source images; omit to slice annotations only")
    sp.add_argument("--split-file", help="split.json from the split command")
    sp.add_argument("--which", choices=SPLITS, default="test")
    sp.add_argument("--patch-w", type=int)
    sp.add_argument("--patch-h", type=int)
    sp.add_argument("--overlap", type=float)
    sp.add_argument("--min-visibility", type=float)
    sp.add_argument("--out", required=True)

    sp = add("augment", cmd_augment, "write an augmented copy of a sliced dataset")
    sp.add_argument("--patches", required=True, help="output directory of the slice command")
    sp.add_argument("--strategy", choices=["pixel", "spatial", "both", "none"])
    sp.add_argument("--probability", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, "run a detector backend over patches")
    sp.add_argument("--patches", required=True, help="output directory of the slice command")
    sp.add_argument("--backend", choices=["oracle", "file"])
    sp.add_argument("--detections", help="patch-level detections file for the file backend")
    sp.add_argument("--drop-rate", type=float)
    sp.add_argument("--jitter-px", type=float)
    sp.add_argument("--confusion-rate", type=float)
    sp.add_argument("--score-model", choices=["constant_1", "iou_with_truth"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("merge", cmd_merge, "reproject patch detections and merge duplicates")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--mode", choices=["nmm", "nms", "none"])
    sp.add_argument("--iou-threshold", type=float)
    sp.add_argument("--class-agnostic", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "COCO-style mAP and confusion matrix")
    sp.add_argument("--dataset", required=True, help="whole-image ground truth")
    sp.add_argument("--detections", required=True, help="merged whole-image detections")
    sp.add_argument("--split-file")
    sp.add_argument("--which", choices=SPLITS, default="test")
    sp.add_argument("--confidence", type=float, help="confusion-matrix score threshold")
    sp.add_argument("--no-figures", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "draw detections on an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--dataset", help="COCO file for class names and image lookup")
    sp.add_argument("--image-id", type=int)
    sp.add_argument("--threshold", type=float, default=0.60)
    sp.add_argument("--out", required=True, help="output PNG")

    sp = add("pipeline", cmd_pipeline, "run every stage from one config")
    sp.set_defaults(config=None)
    sp.add_argument("--out", help="override the configured output directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--mode", choices=["nmm", "nms", "none"])
    sp.add_argument("--iou-threshold", type=float)
    sp.add_argument("--strategy", choices=["pixel", "spatial", "both", "none"])
    return p


def _emit_error(e: BaseException, code: int) -> None:
    rec = {"error": type(e).__name__, "exit_code": code, "message": str(e)}
    stage = getattr(e, "stage", None)
    if stage:
        rec["stage"] = stage
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "pipeline" and not args.config:
        parser.error("pipeline needs --config")
    if args.workers < 1:
        _emit_error(ConfigError("--workers must be at least 1"), 2)
        return 2
    try:
        return args.func(args)
    except TiledetError as e:
        _emit_error(e, e.exit_code)
        return e.exit_code
    except OSError as e:
        _emit_error(e, 4)
        return 4


if __name__ == "__main__":
    sys.exit(main())
