import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from labelenc.codec import Annotation
from labelenc.detector import Detection
from labelenc.evaluation import (
    IOU_THRESHOLDS,
    average_precision,
    evaluate,
    interpolated_ap,
    iou,
    mmap,
    recall_at,
)

from oracles import oracle_mmap, random_box


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_thresholds():
    assert IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def _perfect(gts):
    return [[Detection(g.class_id, 1.0 - 0.01 * k, *g.box()) for k, g in enumerate(img)] for img in gts]


def test_perfect_detections_score_one():
    gts = [[Annotation(0, 0, 0, 10, 10), Annotation(1, 20, 20, 40, 30)], [Annotation(1, 5, 5, 9, 9)]]
    dets = _perfect(gts)
    for t in IOU_THRESHOLDS:
        assert average_precision(dets, gts, t) == 1.0
    assert mmap(dets, gts) == 1.0


def test_no_detections_scores_zero():
    gts = [[Annotation(0, 0, 0, 10, 10)]]
    assert mmap([[]], gts) == 0.0


def test_single_match_at_iou_055_gives_02():
    gt = Annotation(0, 0, 0, 100, 100)
    det = Detection(0, 0.9, 0, 0, 100, 55)  # IoU exactly 0.55
    assert iou(det.box(), gt.box()) == pytest.approx(0.55)
    per_t = [average_precision([[det]], [[gt]], t) for t in IOU_THRESHOLDS]
    assert per_t == [1.0, 1.0] + [0.0] * 8
    assert mmap([[det]], [[gt]]) == pytest.approx(0.2, abs=1e-12)


def test_empty_dataset_is_zero_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        assert mmap([[], []], [[], []]) == 0.0
    assert "without ground truth" in caplog.text


def test_classes_without_gt_are_ignored():
    gts = [[Annotation(0, 0, 0, 10, 10)]]
    dets = [[Detection(0, 0.9, 0, 0, 10, 10), Detection(1, 0.95, 50, 50, 60, 60)]]
    assert mmap(dets, gts) == 1.0


def test_interpolation_hand_example():
    # Ranked hits: TP, FP, TP with 2 GT -> precision envelope 1 up to recall .5, 2/3 up to 1.
    ap = interpolated_ap(np.array([True, False, True]), 2)
    assert ap == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101, abs=1e-15)


def test_greedy_is_not_max_cardinality():
    # A high-score detection grabs the GT that a second detection needed; a bipartite
    # maximum matching would pair both. The COCO protocol (and this code) is greedy.
    g1, g2 = Annotation(0, 0, 0, 10, 10), Annotation(0, 6, 0, 16, 10)
    d1 = Detection(0, 0.9, 2.9, 0, 12.9, 10)  # IoU .55 with g1, .53 with g2
    d2 = Detection(0, 0.8, 0, 0, 10, 10)  # only overlaps g1 above 0.5
    assert iou(d1.box(), g1.box()) > iou(d1.box(), g2.box()) >= 0.5
    assert iou(d2.box(), g2.box()) < 0.5
    assert recall_at([[d1, d2]], [[g1, g2]], 0.5) == 0.5


def _random_instance(rng):
    n_img = int(rng.integers(1, 3))
    budget_d, budget_g = int(rng.integers(0, 6)), int(rng.integers(1, 6))
    dets = [[] for _ in range(n_img)]
    gts = [[] for _ in range(n_img)]
    for _ in range(budget_g):
        gts[int(rng.integers(n_img))].append((int(rng.integers(0, 2)), random_box(rng, 30.0, 3.0)))
    for _ in range(budget_d):
        img = int(rng.integers(n_img))
        if gts[img] and rng.random() < 0.7:
            c, (x0, y0, x1, y1) = gts[img][int(rng.integers(len(gts[img])))]
            j = rng.normal(0, 2.0, 4)
            box = (x0 + j[0], y0 + j[1], max(x1 + j[2], x0 + j[0] + 0.5), max(y1 + j[3], y0 + j[1] + 0.5))
        else:
            c, box = int(rng.integers(0, 2)), random_box(rng, 30.0, 3.0)
        dets[img].append((c, float(rng.random()), tuple(float(v) for v in box)))
    return dets, gts


def _to_objects(dets, gts):
    D = [sorted([Detection(c, s, *b) for c, s, b in img], key=lambda d: -d.score) for img in dets]
    G = [[Annotation(c, *b) for c, b in img] for img in gts]
    return D, G


@given(st.integers(0, 2**31 - 1))
def test_mmap_matches_exhaustive_oracle(seed):
    dets, gts = _random_instance(np.random.default_rng(seed))
    assert abs(mmap(*_to_objects(dets, gts)) - oracle_mmap(dets, gts)) <= 1e-9


@given(st.integers(0, 2**31 - 1))
def test_mmap_bounded_and_ap_monotone(seed):
    D, G = _to_objects(*_random_instance(np.random.default_rng(seed)))
    per_t = [average_precision(D, G, t) for t in IOU_THRESHOLDS]
    assert all(0.0 <= v <= 1.0 for v in per_t)
    assert all(a >= b - 1e-12 for a, b in zip(per_t, per_t[1:]))


def test_report_text():
    gts = [[Annotation(0, 0, 0, 10, 10)]]
    rep = evaluate(_perfect(gts), gts, ["rectangle", "ellipse"])
    text = rep.to_text()
    assert "mmAP 1.000000" in text and "AP@0.50 1.000000" in text and "class 0 rectangle" in text
