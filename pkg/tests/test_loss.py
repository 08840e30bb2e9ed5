import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cplbc import autograd as ag
from cplbc.autograd import Tensor
from cplbc.detector import ModelOutput, anchor_centers, assign_anchors, encode_targets, forward, init_weights
from oracles import ciou_oracle, forward_ref, objective_ref
from cplbc.loss import (anchor_loss, anchor_loss_map, batch_objective, build_targets, ciou_loss,
                        total_loss, weighted_total_loss)


def random_boxes(rng, n, lo=0.0, hi=20.0, min_side=0.5, max_side=12.0):
    xy = rng.uniform(lo, hi, size=(n, 2))
    wh = rng.uniform(min_side, max_side, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_ciou_identical_is_zero():
    assert ciou_loss((1, 2, 5, 7), (1, 2, 5, 7)) == pytest.approx(0.0, abs=1e-7)


def test_ciou_disjoint_unit_boxes():
    assert ciou_loss((0, 0, 1, 1), (2, 2, 3, 3)) == pytest.approx(1 + 8 / 18, abs=1e-6)


def test_ciou_concentric_half_side():
    assert ciou_loss((1, 1, 3, 3), (0, 0, 4, 4)) == pytest.approx(0.75, abs=1e-6)


def test_ciou_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    p, g = random_boxes(rng, 2000), random_boxes(rng, 2000)
    ours = ciou_loss(p, g)
    ref = np.array([ciou_oracle(a, b) for a, b in zip(p, g)])
    assert np.abs(ours - ref).max() < 1e-5


def test_ciou_degenerate_box_is_finite():
    v = ciou_loss((2, 2, 2, 2), (0, 0, 4, 4))
    assert np.isfinite(v) and v > 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(-30, 30), st.floats(-30, 30), st.floats(0.25, 4))
def test_ciou_translation_and_scale_invariance(seed, dx, dy, s):
    rng = np.random.default_rng(seed)
    p, g = random_boxes(rng, 1)[0], random_boxes(rng, 1)[0]
    base = ciou_loss(p, g)
    shift = np.array([dx, dy, dx, dy])
    assert ciou_loss(p + shift, g + shift) == pytest.approx(base, abs=1e-5)
    assert ciou_loss(p * s, g * s) == pytest.approx(base, abs=1e-5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_ciou_bounded(seed):
    rng = np.random.default_rng(seed)
    p, g = random_boxes(rng, 1, max_side=30)[0], random_boxes(rng, 1, min_side=0.01)[0]
    v = ciou_loss(p, g)
    assert 0.0 <= v < 3.0


def test_anchor_loss_examples():
    unit = (0, 0, 1, 1)
    assert anchor_loss(0.0, 0.0, unit, unit, False) == 0.0
    assert anchor_loss(1.0, 0.0, unit, unit, False) == 1.0
    assert anchor_loss(0.5, 1.0, (0, 0, 4, 3), (0, 0, 4, 3), True, alpha=1.0) == pytest.approx(0.25, abs=1e-7)


# -- loss over a grid ---------------------------------------------------------------

def fake_output(conf, box):
    return ModelOutput(conf=Tensor(conf[None]), box=Tensor(box[None]))


def perfect_output(boxes, grid):
    a = assign_anchors(boxes, grid)
    conf = (a.labels >= 0).astype(np.float32)
    box = encode_targets(boxes, a).astype(np.float32)
    return fake_output(conf, box)


def test_perfect_predictions_have_zero_loss():
    boxes = [(4.0, 4.0, 14.0, 12.0), (20.0, 18.0, 30.0, 30.0)]
    bd = total_loss(perfect_output(boxes, (16, 16)), [boxes])[0]
    assert bd.total == pytest.approx(0.0, abs=1e-6)


def test_empty_image_zero_confidence():
    for n_fixed in (1.0, 16.0, 99.0):
        bd = total_loss(fake_output(np.zeros((8, 8)), np.ones((4, 8, 8))), [[]], n_fixed=n_fixed)[0]
        assert bd.total == 0.0 and bd.normalizer == n_fixed and bd.per_object_losses == []


def test_normalizer_is_positive_count():
    boxes = [(4.0, 4.0, 14.0, 12.0)]
    bd = total_loss(fake_output(np.full((16, 16), 0.3), np.ones((4, 16, 16))), [boxes])[0]
    assert bd.normalizer == assign_anchors(boxes, (16, 16)).n_positive


def random_instance(rng, grid=(8, 8)):
    gh, gw = grid
    n = int(rng.integers(0, 4))
    boxes = [tuple(b) for b in random_boxes(rng, n, 0, 2 * gw - 8, 2, 8)]
    conf = rng.uniform(0.01, 0.99, size=grid).astype(np.float32)
    box = rng.uniform(0.5, 6, size=(4,) + grid).astype(np.float32)
    return boxes, fake_output(conf, box)


def anchor_sum_oracle(boxes, out, alpha=5.0, n_fixed=16.0):
    """Direct per-anchor sum with scalar anchor_loss calls."""
    grid = out.conf_map.shape[1:]
    a = assign_anchors(boxes, grid)
    cx, cy = anchor_centers(grid)
    total = 0.0
    for i in range(grid[0]):
        for j in range(grid[1]):
            lab = a.labels[i, j]
            l, t, r, b = out.box_map[0, :, i, j]
            pred = (cx[i, j] - l, cy[i, j] - t, cx[i, j] + r, cy[i, j] + b)
            gt = boxes[lab] if lab >= 0 else pred
            total += anchor_loss(out.conf_map[0, i, j], float(lab >= 0), pred, gt, lab >= 0, alpha)
    n = a.n_positive if boxes else n_fixed
    return total / n


def test_anchor_sum_and_object_grouping_agree():
    rng = np.random.default_rng(1)
    for _ in range(30):
        boxes, out = random_instance(rng)
        bd = total_loss(out, [boxes])[0]
        assert bd.grouped_total == pytest.approx(bd.total, rel=1e-6, abs=1e-9)
        assert bd.total == pytest.approx(anchor_sum_oracle(boxes, out), rel=1e-5)
        assert bd.negative_loss >= 0 and all(v >= 0 for v in bd.per_object_losses)


def test_weighted_total_ones_zeros_and_mixed():
    rng = np.random.default_rng(2)
    while True:
        boxes, out = random_instance(rng)
        if len(boxes) == 2:
            break
    bd = total_loss(out, [boxes])[0]
    ones = float(weighted_total_loss(bd, [1, 1]).data)
    assert ones == pytest.approx(bd.total, rel=1e-6)
    zeros = float(weighted_total_loss(bd, [0, 0]).data)
    assert zeros == pytest.approx(bd.negative_loss / bd.normalizer, rel=1e-6)
    mixed = float(weighted_total_loss(bd, [1, 0.5]).data)
    hand = (bd.negative_loss + bd.per_object_losses[0] + 0.5 * bd.per_object_losses[1]) / bd.normalizer
    assert mixed == pytest.approx(hand, rel=1e-6)
    with pytest.raises(ValueError):
        weighted_total_loss(bd, [1.0])


def test_weighted_loss_is_linear_in_v():
    rng = np.random.default_rng(3)
    while True:
        boxes, out = random_instance(rng)
        if len(boxes) >= 2:
            break
    bd = total_loss(out, [boxes])[0]
    v = rng.uniform(0.2, 0.8, size=len(boxes))
    h = 1e-2
    for i in range(len(boxes)):
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        d = (bd.weighted_value(vp) - bd.weighted_value(vm)) / (2 * h)
        assert d == pytest.approx(bd.per_object_losses[i] / bd.normalizer, rel=1e-6)


def _gradcheck_case(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((2, 1, 16, 16)).astype(np.float32)
    boxes = [[(2.0, 3.0, 10.0, 11.0)], [(4.0, 4.0, 9.0, 14.0), (10.0, 1.0, 15.0, 7.0)]]
    targets = [build_targets(b, (8, 8)) for b in boxes]
    v = [np.array([0.7]), np.array([1.0, 0.3])]
    return rng, x, targets, v, init_weights(seed)


def test_forward_and_objective_match_float64_reference():
    _, x, targets, v, w = _gradcheck_case(4)
    out = forward(w, x)
    conf, box = forward_ref(w, x)
    np.testing.assert_allclose(out.conf_map, conf, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(out.box_map, box, rtol=1e-5, atol=1e-5)
    lm, _, _ = anchor_loss_map(out, targets)
    ours = float(batch_objective(lm, targets, v).data)
    assert ours == pytest.approx(objective_ref(w, x, targets, v), rel=1e-5)


def test_weighted_loss_gradient_vs_finite_differences():
    rng, x, targets, v, w = _gradcheck_case(4)
    out = forward(w, x)
    lm, _, _ = anchor_loss_map(out, targets)
    ag.backward(batch_objective(lm, targets, v))
    for name in ["conv1.w", "conv2.b", "conv3.w", "conf.w", "box.w", "box.b"]:
        base = {n: t.data.astype(np.float64) for n, t in w.items()}
        flat = base[name].reshape(-1)
        for k in rng.choice(flat.size, size=2, replace=False):
            h = 1e-5
            vals = []
            for sgn in (1, -1):
                wc = {n: a.copy() for n, a in base.items()}
                wc[name].reshape(-1)[k] += sgn * h
                vals.append(objective_ref(wc, x, targets, v))
            num = (vals[0] - vals[1]) / (2 * h)
            an = float(w[name].grad.reshape(-1)[k])
            assert abs(an - num) <= 1e-3 * max(abs(an), abs(num)) + 1e-6, (name, k, an, num)


def test_negative_anchor_term_never_weighted():
    rng = np.random.default_rng(5)
    while True:
        boxes, out = random_instance(rng)
        if boxes:
            break
    bd = total_loss(out, [boxes])[0]
    zero = bd.weighted_value(np.zeros(len(boxes)))
    assert zero == pytest.approx(bd.negative_loss / bd.normalizer)
