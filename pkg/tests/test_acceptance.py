"""Acceptance criteria, one test each, at their stated tolerances."""

import json
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from acceptance_log import check
from oracles import as_exact, duplicate_penalty, fragment_chain, match_detections, nmm_oracle, two_image_fixture
from tiledet.cli import main
from tiledet.dataset import Annotation, DatasetIndex, Detection, EnvMetadata, ImageRecord, load_coco, wsbd_categories
from tiledet.detector import OracleConfig
from tiledet.evaluator import area_bucket, average_precision, coco_map
from tiledet.geometry import BBox
from tiledet.pipeline import PipelineConfig, run_pipeline, tree_hash, whole_image_baseline
from tiledet.postprocess import MergeMode, PostprocessConfig, flatten, nmm_merge, postprocess_pipeline
from tiledet.slicer import SliceConfig, compute_patch_grid, slice_annotations, visibility
from tiledet.splitter import SPLITS, SplitSpec, stratified_split
from tiledet.synth import SynthSpec, write_synthetic


@pytest.fixture(scope="module")
def default_synth(tmp_path_factory):
    """The default synthetic set: 20 images near 3000x4000 px, 25 long-tailed classes."""
    root = tmp_path_factory.mktemp("default_synth")
    write_synthetic(SynthSpec(), root, write_images=False)
    return root


def enumerate_windows(size: int, patch: int, overlap: float) -> list[Fraction]:
    """Every multiple of the step whose window fits, plus one window flush with the far edge."""
    if size <= patch:
        return [Fraction(0)]
    step = patch * (1 - Fraction(str(overlap)))
    fits = {k * step for k in range(int(size // step) + 2) if k * step + patch <= size}
    return sorted(fits | {Fraction(size - patch)})


def covers(origins, patch, size) -> bool:
    reach = Fraction(0)
    for o in origins:
        if o > reach:
            return False
        reach = max(reach, o + min(patch, size))
    return reach >= size


def test_01_grid_arithmetic():
    r = random.Random(2024)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        w, h = r.randint(600, 6000), r.randint(600, 6000)
        patch = r.choice([250, 500, 750, 1000])
        overlap = r.choice([0.0, 0.25, 0.5])
        grid = compute_patch_grid(ImageRecord(1, "x", w, h), SliceConfig(patch, patch, overlap))
        xs = [Fraction(v) for v in grid.x_origins]
        ys = [Fraction(v) for v in grid.y_origins]
        ok = (
            xs == enumerate_windows(w, patch, overlap)
            and ys == enumerate_windows(h, patch, overlap)
            and covers(xs, patch, w)
            and covers(ys, patch, h)
            and len(grid.windows()) == len(xs) * len(ys)
            and all(b.x2 <= w and b.y2 <= h for b in grid.windows())
        )
        bad += not ok
    elapsed = time.perf_counter() - t0
    check(1, bad == 0 and elapsed < 5.0, f"{1000 - bad}/1000 cases match with full coverage in {elapsed:.2f} s")


def test_02_visibility_boundary():
    window = BBox(0, 0, 500, 500)
    ann = Annotation(1, 1, 1, BBox(480, 480, 40, 40))
    grid = compute_patch_grid(ImageRecord(1, "x", 500, 500), SliceConfig(500, 500, 0.5, 0.25))
    vis = visibility(ann.bbox, window)
    kept = slice_annotations([ann], grid, SliceConfig(500, 500, 0.5, 0.25))[0].annotations
    dropped = slice_annotations([ann], grid, SliceConfig(500, 500, 0.5, 0.26))[0].annotations
    ok = vis == 0.25 and len(kept) == 1 and kept[0].bbox == BBox(480, 480, 20, 20) and dropped == ()
    check(2, ok, f"visibility {vis}, kept at 0.25: {len(kept)}, kept at 0.26: {len(dropped)}")


def test_03_merge_oracle_equivalence():
    r = random.Random(3)
    thresholds = [round(0.05 * k, 2) for k in range(1, 11)]
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(500):
        dets = []
        for cid in (1, 2, 3):
            for _ in range(r.randint(0, 10)):
                x, y, w, h = r.randint(0, 60), r.randint(0, 60), r.randint(1, 30), r.randint(1, 30)
                score = r.choice([0.5, 0.5, 0.9, 1.0, round(r.random(), 2)])
                dets.append(_det(x, y, w, h, score, cid))
        for t in thresholds:
            shuffled = dets[:]
            r.shuffle(shuffled)
            got = nmm_merge(shuffled, PostprocessConfig(MergeMode.NMM, t))
            mismatches += as_exact(got) != nmm_oracle(dets, t)
    elapsed = time.perf_counter() - t0
    check(3, mismatches == 0 and elapsed < 10.0,
          f"{5000 - mismatches}/5000 instance-threshold pairs equal the exact oracle in {elapsed:.2f} s")


def _det(x, y, w, h, score, cid, img=1):
    return Detection(BBox(x, y, w, h), cid, score, image_id=img)


def test_04_end_to_end_identity(default_synth, tmp_path):
    t0 = time.perf_counter()
    cfg = PipelineConfig.from_dict({
        "dataset": str(default_synth / "dataset.json"), "output": str(tmp_path / "run"),
    })
    res = run_pipeline(cfg)
    elapsed = time.perf_counter() - t0
    rep = res.reports["all"]
    m = rep.confusion
    off_diag = int(np.count_nonzero(m - np.diag(np.diag(m))))
    ok = abs(rep.map_50_95 - 1.0) <= 1e-3 and off_diag == 0 and np.trace(m) > 0 and elapsed < 120
    check(4, ok, f"mAP@0.5:0.95 {rep.map_50_95:.4f}, {off_diag} off-diagonal cells, "
                 f"{sum(res.n_patches.values())} patches, {elapsed:.1f} s without patch rasters")


def test_05_ablation_ordering(default_synth, tmp_path):
    maps = {}
    for mode in ("nmm", "nms", "none"):
        cfg = PipelineConfig.from_dict({
            "dataset": str(default_synth / "dataset.json"), "output": str(tmp_path / mode), "figures": False,
            "backend": {"jitter_px": 4, "drop_rate": 0.1, "score_model": "iou_with_truth"},
            "postprocess": {"mode": mode},
        })
        rep = run_pipeline(cfg).reports["all"]
        maps[mode] = (rep.map_50, rep.map_50_95)
    # the gap is measured from the default merge mode
    ok = all(
        maps["nmm"][k] >= maps["nms"][k] >= maps["none"][k] and maps["nmm"][k] - maps["none"][k] >= 0.10
        for k in (0, 1)
    )
    txt = ", ".join(f"{m} {v[0]:.3f}/{v[1]:.3f}" for m, v in maps.items())
    gaps = ", ".join(f"{m}-none {maps[m][0] - maps['none'][0]:.3f}/{maps[m][1] - maps['none'][1]:.3f}"
                     for m in ("nmm", "nms"))
    check(5, ok, f"mAP@0.5 / @0.5:0.95: {txt}; gaps {gaps}")


def test_06_downscale_degradation(default_synth, tmp_path):
    cfg = PipelineConfig.from_dict({
        "dataset": str(default_synth / "dataset.json"), "output": str(tmp_path / "run"),
        "figures": False, "eval_split": "all",
    })
    patched = run_pipeline(cfg).reports["all"].map_50_small
    gt = load_coco(default_synth / "dataset.json")
    small_share = sum(area_bucket(a.bbox.area) == "small" for a in gt.annotations) / len(gt.annotations)
    coarse = whole_image_baseline(gt, 4.0, OracleConfig())["all"].map_50_small
    drop = patched - coarse
    ok = small_share >= 0.30 and drop >= 0.20
    check(6, ok, f"small mAP@0.5 patched {patched:.3f}, 4x downscaled {coarse:.3f}, drop {drop:.3f}, "
                 f"small share {small_share:.2f}")


def test_07_evaluator_ground_truth():
    ds, dets = two_image_fixture()
    fixture_map = coco_map(ds, dets).map_50
    g = [Annotation(1, 1, 1, BBox(0, 0, 10, 10))]
    fp_tp = average_precision([match_detections(g, [_det(50, 50, 10, 10, 0.9, 1), _det(0, 0, 10, 10, 0.8, 1)], 0.5)])
    r = random.Random(7)
    checked, violations = 0, 0
    while checked < 100:
        out = duplicate_penalty(r)
        if out is None:
            continue
        before, after, later = out
        checked += 1
        violations += after > before or (later and not after < before)
    ok = abs(fp_tp - 0.5) <= 1e-6 and abs(fixture_map - 0.75) <= 1e-6 and violations == 0
    check(7, ok, f"FP-then-TP AP {fp_tp:.6f}, fixture mAP {fixture_map:.6f}, "
                 f"duplicate penalty held on {checked - violations}/100 fixtures")


def split_dataset(rng: np.random.Generator) -> DatasetIndex:
    counts = np.clip(np.rint(rng.lognormal(4.5, 1.0, 100)), 5, 1693).astype(int)
    cats = wsbd_categories()
    images, anns = [], []
    aid = 1
    for i, n in enumerate(counts, start=1):
        meta = EnvMetadata(str(rng.choice(["soft", "hard"])), float(rng.uniform(421, 2202)),
                           float(rng.uniform(0, 80)))
        images.append(ImageRecord(i, f"{i}.png", 4000, 4000, meta))
        for k in range(n):
            anns.append(Annotation(aid, i, 1 + (k % 25), BBox(k % 100 * 30, k // 100 * 30, 10, 10)))
            aid += 1
    return DatasetIndex(images, anns, cats)


def test_08_split_fidelity():
    rng = np.random.default_rng(8)
    spec = SplitSpec()
    within, invariant_fail = 0, 0
    for _ in range(200):
        ds = split_dataset(rng)
        a = stratified_split(ds, spec)
        b = stratified_split(ds, spec)
        groups = [set(a.image_ids(s)) for s in SPLITS]
        partition = (
            set().union(*groups) == set(ds.image_by_id)
            and sum(len(g) for g in groups) == len(ds.images)
            and all(groups)
        )
        invariant_fail += not (partition and a.mapping == b.mapping)
        within += all(abs(f - t) <= 0.05 for f, t in zip(a.achieved_fractions, spec.target_fractions))
    ok = within >= 190 and invariant_fail == 0
    check(8, ok, f"{within}/200 runs within 5 points of targets, {200 - invariant_fail}/200 partition "
                 "and determinism")


def test_09_fragment_chain():
    cfg = PostprocessConfig(MergeMode.NMM, 0.20)
    whole = flatten(postprocess_pipeline(*fragment_chain(gap=False), cfg))
    broken = flatten(postprocess_pipeline(*fragment_chain(gap=True), cfg))
    nms = flatten(postprocess_pipeline(*fragment_chain(gap=False), PostprocessConfig(MergeMode.NMS, 0.20)))
    ok = len(whole) == 1 and whole[0].bbox == BBox(0, 0, 1250, 1000) and len(broken) == 2 and len(nms) > 1
    check(9, ok, f"chain merges to {len(whole)} box, chain with a gap to {len(broken)} boxes, "
                 f"NMS leaves {len(nms)}")


def test_10_determinism(synth_dir, tmp_path):
    cfg_doc = {"dataset": str(synth_dir / "dataset.json"), "images": str(synth_dir / "images"), "seed": 3,
               "augment": {"strategy": "both"}, "backend": {"jitter_px": 2, "drop_rate": 0.2},
               "eval_split": "all"}
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(cfg_doc))
    codes = [main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / name), "--workers", str(w)])
             for name, w in (("one", 1), ("three", 3))]
    h1, h3 = tree_hash(tmp_path / "one"), tree_hash(tmp_path / "three")
    n_files = sum(1 for p in (tmp_path / "one").rglob("*") if p.is_file())
    check(10, codes == [0, 0] and h1 == h3, f"{n_files} files, tree hash {h1[:12]} (1 worker) vs "
                                            f"{h3[:12]} (3 workers)")
