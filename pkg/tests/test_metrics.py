import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cplbc.metrics import (IOU_THRESHOLDS, evaluate_detections, fdr, match_detections,
                           precision_recall, voc07_ap)
from oracles import brute_force_ap


def test_worked_example():
    assert voc07_ap([True, False, True], [0.9, 0.8, 0.7], 2) == pytest.approx((6 + 5 * 2 / 3) / 11, abs=1e-12)
    assert voc07_ap([True, False, True], [0.9, 0.8, 0.7], 2) == pytest.approx(0.8485, abs=1e-4)


def test_ap_edge_cases():
    assert voc07_ap([True, True], [0.9, 0.5], 2) == 1.0
    assert voc07_ap([], [], 3) == 0.0
    assert voc07_ap([], [], 0) == 1.0
    assert voc07_ap([False], [0.5], 0) == 0.0
    with pytest.raises(ValueError):
        voc07_ap([], [], -1)


def test_ap_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        tp = rng.random(n) < 0.6
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse scores give ties
        n_gt = int(tp.sum() + rng.integers(0, 4))
        assert abs(voc07_ap(tp, scores, n_gt) - brute_force_ap(tp, scores, n_gt)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=1, max_size=15), st.randoms())
def test_ap_independent_of_input_order(pairs, rnd):
    tp = [p[0] for p in pairs]
    sc = [p[1] for p in pairs]
    n_gt = sum(tp) + 1
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    a = voc07_ap(tp, sc, n_gt)
    b = voc07_ap([tp[i] for i in perm], [sc[i] for i in perm], n_gt)
    assert a == b and 0.0 <= a <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0.01, 1)), min_size=1, max_size=15),
       st.floats(0.1, 10))
def test_ap_invariant_to_monotone_rescoring(pairs, k):
    tp = [p[0] for p in pairs]
    sc = np.array([p[1] for p in pairs])
    n_gt = sum(tp) + 1
    assert voc07_ap(tp, sc, n_gt) == voc07_ap(tp, sc ** k, n_gt)


def test_tied_scores_enter_the_curve_together():
    prec, rec = precision_recall([False, True], [0.5, 0.5], 1)
    np.testing.assert_allclose(prec, [0.5])
    np.testing.assert_allclose(rec, [1.0])
    assert voc07_ap([False, True], [0.5, 0.5], 1) == voc07_ap([True, False], [0.5, 0.5], 1) == 0.5
    prec, rec = precision_recall([True, False, True], [0.9, 0.4, 0.4], 2)
    np.testing.assert_allclose(prec, [1.0, 2 / 3])
    np.testing.assert_allclose(rec, [0.5, 1.0])


def test_match_examples():
    gts = [(0, 0, 10, 10), (20, 20, 30, 30)]
    assert match_detections(gts, gts, 0.5).all()
    dup = match_detections([(0, 0, 10, 10), (0, 0, 10, 9)], gts[:1], 0.5)
    assert dup.tolist() == [True, False]
    assert not match_detections(gts, [], 0.5).any()
    assert match_detections([], gts, 0.5).size == 0
    # IoU exactly 0.5 counts as a match
    assert match_detections([(0, 0, 10, 5)], gts[:1], 0.5).tolist() == [True]


def test_fdr():
    assert fdr([True, False, False, True]) == 0.5
    assert fdr([]) == 0.0


def test_evaluate_perfect_and_empty():
    gts = [[(0, 0, 10, 10)], [(5, 5, 25, 20), (30, 30, 40, 44)], []]
    dets = [[(b, 0.9) for b in g] for g in gts]
    r = evaluate_detections(dets, gts)
    assert r.ap50 == r.ap75 == r.ap == 1.0 and r.fdr == 0.0
    assert set(r.per_threshold) == set(IOU_THRESHOLDS) and len(IOU_THRESHOLDS) == 10
    none = evaluate_detections([[], [], []], gts)
    assert none.ap50 == 0.0 and none.fdr == 0.0 and none.n_detections == 0
    with pytest.raises(ValueError):
        evaluate_detections([[]], gts)


def test_ap_mean_bounded_by_ap50():
    rng = np.random.default_rng(1)
    gts = [[(10.0, 10.0, 30.0, 30.0)] for _ in range(20)]
    dets = [[((10 + rng.normal(0, 3), 10 + rng.normal(0, 3), 30 + rng.normal(0, 3), 30), rng.random())]
            for _ in range(20)]
    r = evaluate_detections(dets, gts)
    assert r.ap <= max(r.per_threshold.values()) and r.ap75 <= r.ap50
    assert all(0 <= v <= 1 for v in (r.ap50, r.ap75, r.ap, r.fdr))
