import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_ds
from oracles import det, duplicate_penalty, naive_ap, naive_match, random_fixture, two_image_fixture
from tiledet.dataset import Annotation, Detection
from tiledet.errors import ConfigError, DataError
from tiledet.evaluator import (
    EvalConfig, area_bucket, average_precision, coco_map, confusion_matrix, evaluate, match_detections,
)
from tiledet.geometry import BBox, iou


def gt(x, y, w, h, cid=1, i=1, img=1):
    return Annotation(i, img, cid, BBox(x, y, w, h))


# -- examples -----------------------------------------------------------------


def test_area_buckets():
    assert [area_bucket(a) for a in (1023.9, 1024, 9215.9, 9216)] == ["small", "medium", "medium", "large"]


def test_match_examples():
    g = [gt(0, 0, 10, 10)]
    m = match_detections(g, [det(0, 0, 10, 9, 0.9)], 0.5)
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)
    m = match_detections(g, [det(0, 0, 10, 10, 0.7), det(0, 0, 10, 9.5, 0.9)], 0.5)
    assert (m.tp, m.fp) == (1, 1) and m.scores[0] == 0.9 and m.det_match[0] == 0 and m.det_match[1] == -1
    # IoU just under the threshold
    m = match_detections(g, [det(0, 0, 10, 4.9, 0.9)], 0.5)
    assert iou(BBox(0, 0, 10, 4.9), g[0].bbox) < 0.5
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_match_respects_max_dets():
    g = [gt(0, 0, 10, 10, i=1), gt(50, 50, 10, 10, i=2)]
    m = match_detections(g, [det(0, 0, 10, 10, 0.9), det(50, 50, 10, 10, 0.8)], 0.5, max_dets=1)
    assert (m.tp, m.fp, m.fn) == (1, 0, 1)


def test_ap_examples():
    g = [gt(0, 0, 10, 10)]
    assert average_precision([match_detections(g, [det(0, 0, 10, 10, 0.8)], 0.5)]) == 1.0
    fp_then_tp = [det(50, 50, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)]
    assert average_precision([match_detections(g, fp_then_tp, 0.5)]) == pytest.approx(0.5, abs=1e-12)
    assert average_precision([match_detections(g, [], 0.5)]) == 0.0
    assert average_precision([match_detections([], [det(0, 0, 1, 1, 0.5)], 0.5)]) == 0.0
    assert average_precision([match_detections([], [], 0.5)]) is None
    assert average_precision([]) is None


def test_two_image_fixture():
    ds, dets = two_image_fixture()
    rep = coco_map(ds, dets)
    assert [r.ap_50 for r in rep.per_class] == pytest.approx([1.0, 0.5], abs=1e-12)
    assert rep.map_50 == pytest.approx(0.75, abs=1e-6)
    assert rep.map_50_95 == pytest.approx(0.75, abs=1e-6)
    # cross-check with the naive matcher and AP
    for cid, want in ((1, 1.0), (2, 0.5)):
        pairs = []
        for img in (1, 2):
            g = [a for a in ds.annotations if a.image_id == img and a.category_id == cid]
            d = [x for x in dets if x.image_id == img and x.category_id == cid]
            pairs += naive_match(g, d, 0.5)
        assert naive_ap(pairs, 3) == pytest.approx(want)


def test_empty_detections_score_zero():
    ds, _ = two_image_fixture()
    rep = coco_map(ds, [])
    assert rep.map_50_95 == rep.map_50 == 0.0
    assert rep.map_50_medium == 0.0 and rep.map_50_small is None and rep.map_50_large is None


def test_identity_scores_one():
    ds, _ = two_image_fixture()
    dets = [Detection(a.bbox, a.category_id, 1.0, image_id=a.image_id) for a in ds.annotations]
    rep = coco_map(ds, dets)
    assert rep.map_50_95 == rep.map_50 == rep.map_50_medium == 1.0
    assert np.count_nonzero(rep.confusion - np.diag(np.diag(rep.confusion))) == 0


def test_class_without_ground_truth():
    ds = make_ds({1: [(1, (0, 0, 10, 10))]}, n_classes=3)
    rep = coco_map(ds, [det(0, 0, 10, 10, 0.9, 1), det(50, 50, 10, 10, 0.9, 2)])
    aps = {r.category_id: r.ap_50 for r in rep.per_class}
    assert aps == {1: 1.0, 2: 0.0, 3: None}
    assert rep.map_50 == 0.5


def test_unknown_references():
    ds, _ = two_image_fixture()
    with pytest.raises(DataError, match="image 9"):
        coco_map(ds, [det(0, 0, 1, 1, 0.5, 1, 9)])
    with pytest.raises(DataError, match="category 7"):
        coco_map(ds, [det(0, 0, 1, 1, 0.5, 7, 1)])
    with pytest.raises(DataError):
        coco_map(ds, [Detection(BBox(0, 0, 1, 1), 1, 0.5, patch_id=3)])


def test_size_bucket_ignores_out_of_bucket_matches():
    ds = make_ds({1: [(1, (0, 0, 20, 20)), (1, (100, 100, 50, 50))]}, n_classes=1)
    dets = [det(0, 0, 20, 20, 0.9), det(100, 100, 50, 50, 0.8)]
    rep = coco_map(ds, dets)
    assert rep.map_50_small == rep.map_50_medium == 1.0 and rep.map_50_large is None
    # a large false alarm is ignored by the small bucket but hurts the large one
    rep = coco_map(ds, dets + [det(500, 500, 200, 200, 0.95)])
    assert rep.map_50_small == 1.0 and rep.map_50_large == 0.0


@pytest.mark.parametrize("bad", [dict(iou_thresholds=()), dict(iou_thresholds=(0.5, 0.5)),
                                 dict(iou_thresholds=(0.0,)), dict(max_dets_per_image=0),
                                 dict(confusion_confidence=1.5)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        EvalConfig(**bad)


def test_subset_evaluation():
    ds, dets = two_image_fixture()
    reps = evaluate(ds, dets, EvalConfig(class_subset=(2,)))
    assert reps["subset"].map_50 == pytest.approx(0.5)
    assert reps["all"].map_50 == pytest.approx(0.75)
    assert reps["subset"].confusion.shape == (3, 3)


# -- confusion matrix ---------------------------------------------------------


def abundance_ds():
    return make_ds({1: [(2, (0, 0, 10, 10)), (2, (20, 0, 10, 10)), (1, (40, 0, 10, 10))]}, n_classes=2)


def test_confusion_identity_and_layout():
    ds = abundance_ds()
    dets = [Detection(a.bbox, a.category_id, 0.6, image_id=1) for a in ds.annotations]
    m, labels, ids = confusion_matrix(ds, dets)
    assert ids == [2, 1] and labels == ["c2", "c1", "background", "missed"]
    assert m.tolist() == [[2, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]


def test_confusion_swapped_labels():
    ds = abundance_ds()
    dets = [Detection(a.bbox, 3 - a.category_id, 0.9, image_id=1) for a in ds.annotations]
    m, _, _ = confusion_matrix(ds, dets)
    assert m[0, 1] == 2 and m[1, 0] == 1 and np.trace(m) == 0


def test_confusion_low_confidence_all_missed():
    ds = abundance_ds()
    dets = [Detection(a.bbox, a.category_id, 0.5999, image_id=1) for a in ds.annotations]
    m, _, _ = confusion_matrix(ds, dets)
    assert m[:, 3].tolist() == [2, 1, 0, 0] and m.sum() == 3


def test_confusion_background_column():
    ds = abundance_ds()
    m, _, _ = confusion_matrix(ds, [det(500, 500, 10, 10, 0.9, 1)])
    assert m[2, 1] == 1


# -- properties ---------------------------------------------------------------


@given(st.integers(0, 10**6))
def test_matches_naive_reference(seed):
    ds, dets = random_fixture(random.Random(seed))
    rep = coco_map(ds, dets, EvalConfig(iou_thresholds=(0.5, 0.75)))
    for r in rep.per_class:
        for t in (0.5, 0.75):
            pairs = []
            for img in ds.image_by_id:
                g = [a for a in ds.annotations if a.image_id == img and a.category_id == r.category_id]
                d = [x for x in dets if x.image_id == img and x.category_id == r.category_id]
                pairs += naive_match(g, d, t)
            want = naive_ap(pairs, r.n_gt)
            got = rep.ap_table[t][r.category_id]
            assert got == want if want is None else got == pytest.approx(want, abs=1e-12)


@given(st.integers(0, 10**6))
def test_ap_bounds_counts_and_rank_invariance(seed):
    ds, dets = random_fixture(random.Random(seed))
    rep = coco_map(ds, dets)
    for r in rep.per_class:
        for v in (r.ap_50, r.ap_50_95, r.ap_50_small, r.ap_50_medium, r.ap_50_large):
            assert v is None or 0.0 <= v <= 1.0
        assert r.tp + r.fn == r.n_gt
        assert r.tp + r.fp == sum(1 for d in dets if d.category_id == r.category_id)
    squashed = [Detection(d.bbox, d.category_id, d.score**3 / 2, image_id=d.image_id) for d in dets]
    rep2 = coco_map(ds, squashed)
    assert rep2.map_50_95 == rep.map_50_95 and rep2.map_50 == rep.map_50


@given(st.integers(0, 10**6))
def test_subset_map_is_mean_of_subset(seed):
    ds, dets = random_fixture(random.Random(seed), classes=3)
    rep = coco_map(ds, dets, EvalConfig(class_subset=(1, 3)))
    vals = [r.ap_50 for r in rep.per_class if r.ap_50 is not None]
    assert [r.category_id for r in rep.per_class] == [1, 3]
    assert rep.map_50 == (pytest.approx(sum(vals) / len(vals)) if vals else None)


@given(st.integers(0, 10**6))
def test_size_buckets_partition_ground_truth(seed):
    ds, dets = random_fixture(random.Random(seed))
    for img in ds.image_by_id:
        g = ds.annotations_by_image.get(img, [])
        kept = [int(np.sum(~match_detections(g, [], 0.5, area_range=b).gt_ignore))
                for b in ("small", "medium", "large")]
        assert sum(kept) == len(g)


def test_duplicate_detection_penalty():
    r = random.Random(7)
    checked = strict = 0
    while checked < 100:
        out = duplicate_penalty(r)
        if out is None:
            continue
        before, after, later = out
        checked += 1
        assert after <= before
        if later:
            strict += 1
            assert after < before
    assert strict > 20
