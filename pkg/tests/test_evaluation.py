import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from mpdf.evaluation import (
    accuracy,
    ap_at_iou,
    average_precision,
    classification_report,
    evaluate_localization,
    interpolated_ap,
    nms,
    roc_auc,
    segment_iou,
)
from mpdf.heads import SegmentProposal


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_force_nms(props, thresh):
    """Largest-first greedy selection characterised without a running kept list:
    a proposal survives iff no surviving higher-ranked proposal overlaps it."""
    order = sorted(props, key=lambda p: (-p.score, p.start, p.end - p.start))
    survives = {}
    for i, p in enumerate(order):
        survives[i] = not any(
            survives[j] and segment_iou((p.start, p.end), (order[j].start, order[j].end)) >= thresh
            for j in range(i)
        )
    # cross-check the defining property over every pair of survivors
    kept = [order[i] for i in range(len(order)) if survives[i]]
    for a, b in itertools.combinations(kept, 2):
        assert segment_iou((a.start, a.end), (b.start, b.end)) < thresh
    return kept


def test_segment_iou():
    assert segment_iou((0, 10), (5, 15)) == pytest.approx(5 / 15)
    assert segment_iou((0, 1), (2, 3)) == 0.0
    assert segment_iou((2, 4), (2, 4)) == 1.0


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=4, max_size=30), st.integers(0, 1000))
def test_auc_invariant_under_monotone_transform(scores, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, len(scores))
    labels[:2] = [0, 1]
    # a coarse grid keeps the transform strictly monotone in floating point
    s = np.asarray(scores) / 4.0
    assert roc_auc(np.exp(s) * 3 + 1, labels) == roc_auc(s, labels)


def test_auc_single_class():
    with pytest.raises(ValueError, match="one class"):
        roc_auc([0.1, 0.2], [1, 1])
    assert np.isnan(classification_report([0.1, 0.2], [1, 1])["AUC"])


def test_average_precision_matches_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        labels[0] = 1
        scores = np.round(rng.random(n), 1)
        assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)


def test_accuracy():
    assert accuracy([0.2, 0.7, 0.5, 0.1], [0, 1, 0, 0]) == 0.75


def test_nms_hand_case():
    props = [(0, 10, 0.9), (1, 10, 0.8), (20, 30, 0.7), (0, 4, 0.6)]
    kept = nms(props, 0.5)
    assert [(p.start, p.end) for p in kept] == [(0, 10), (20, 30), (0, 4)]


def test_nms_tie_break_prefers_earlier_start_then_shorter():
    kept = nms([(5, 10, 0.5), (4, 10, 0.5), (4, 9, 0.5)], 0.5)
    assert [(p.start, p.end) for p in kept] == [(4, 9)]


def test_nms_matches_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(0, 7))
        props = []
        for _ in range(n):
            s = float(rng.integers(0, 20))
            props.append(SegmentProposal(s, s + float(rng.integers(1, 10)), float(rng.integers(1, 6)) / 5))
        thresh = float(rng.choice([0.3, 0.5, 0.7]))
        assert nms(props, thresh) == brute_force_nms(props, thresh)


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([], 1.0)


def test_ap_fixture():
    gts = {"a": [(0, 10)], "b": [(20, 30)]}
    props = {"a": [(0, 10, 0.9)], "b": [(0, 5, 0.8), (21, 30, 0.7)]}
    # ranked hits: TP, FP, TP over 2 ground truths
    assert ap_at_iou(props, gts, 0.5) == pytest.approx(5 / 6, abs=1e-12)
    # at 0.95 only the exact match counts
    assert ap_at_iou(props, gts, 0.95) == pytest.approx(0.5, abs=1e-12)


def test_duplicate_detection_is_false_positive():
    gts = {"a": [(0, 10)]}
    props = {"a": [(0, 10, 0.9), (0, 10, 0.8)]}
    assert ap_at_iou(props, gts, 0.5) == pytest.approx(1.0)


def test_interpolated_ap_edges():
    assert interpolated_ap(np.array([]), 3) == 0.0
    assert interpolated_ap(np.array([1.0]), 0) == 0.0
    assert interpolated_ap(np.array([0.0, 1.0]), 1) == pytest.approx(0.5)


def test_map_is_mean_of_thresholds():
    gts = {"a": [(0, 10)], "b": [(20, 30)]}
    props = {"a": [(0, 10, 0.9)], "b": [(0, 5, 0.8), (21, 30, 0.7)]}
    res = evaluate_localization(props, gts)
    d = res.as_dict()
    assert set(d) == {"AP@0.5", "AP@0.75", "AP@0.95", "mAP"}
    assert d["mAP"] == pytest.approx((d["AP@0.5"] + d["AP@0.75"] + d["AP@0.95"]) / 3)


def test_perfect_proposals_give_unit_map():
    gts = {"x": [(3, 9), (20, 26)], "y": [(0, 64)]}
    props = {k: [(s, e, 0.9) for s, e in v] for k, v in gts.items()}
    assert evaluate_localization(props, gts).map_mean == pytest.approx(1.0)
