"""Multi-task detection loss and its per-object weighted form.

Per anchor: ``(conf - target)^2 + alpha * CIoU`` where the CIoU term only
applies to positive anchors. An image's total is the sum over its anchors
divided by N (its positive-anchor count, or ``n_fixed`` for an image
without objects). Regrouping the same sum as negatives plus one term per
object gives the per-object losses that curriculum weights multiply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .detector import (AnchorAssignment, ModelOutput, anchor_centers, assign_anchors,
                       target_boxes)

DEFAULT_ALPHA = 5.0
DEFAULT_N_FIXED = 16.0
_V_COEF = 4.0 / math.pi ** 2


def ciou_terms(px1, py1, px2, py2, gx1, gy1, gx2, gy2) -> Tensor:
    """CIoU loss elementwise; predicted sides are tensors, gt sides arrays or tensors."""
    pw = px2 - px1
    ph = py2 - py1
    gw = ag.sub(gx2, gx1)
    gh = ag.sub(gy2, gy1)
    iw = ag.relu(ag.minimum(px2, gx2) - ag.maximum(px1, gx1))
    ih = ag.relu(ag.minimum(py2, gy2) - ag.maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = ag.div(inter, union)
    dx = (px1 + px2) * 0.5 - (gx1 + gx2) * 0.5
    dy = (py1 + py2) * 0.5 - (gy1 + gy2) * 0.5
    rho2 = ag.square(dx) + ag.square(dy)
    cw = ag.maximum(px2, gx2) - ag.minimum(px1, gx1)
    ch = ag.maximum(py2, gy2) - ag.minimum(py1, gy1)
    c2 = ag.square(cw) + ag.square(ch)
    v = ag.square(ag.atan(ag.div(gw, gh)) - ag.atan(ag.div(pw, ph))) * _V_COEF
    one_minus_iou = 1.0 - iou
    a = ag.div(v, one_minus_iou + v)
    return one_minus_iou + ag.div(rho2, c2) + a * v


def _tensor_coords(box):
    b = np.asarray(box, dtype=np.float32)
    return [Tensor(b[..., i]) for i in range(4)]


def ciou_loss(pred, gt):
    """CIoU loss between xyxy boxes.

    Accepts single boxes or ``[..., 4]`` arrays. Returns a float for plain
    inputs; if ``pred`` holds four tensors the result is a tensor on the tape.
    """
    if isinstance(pred, (list, tuple)) and len(pred) == 4 and all(isinstance(p, Tensor) for p in pred):
        g = np.asarray(gt, dtype=np.float32)
        return ciou_terms(*pred, *(g[..., i] for i in range(4)))
    p = _tensor_coords(pred)
    g = _tensor_coords(gt)
    out = ciou_terms(*p, *g)
    return float(out.data) if out.data.ndim == 0 else out.data.astype(np.float64)


def anchor_loss(pred_conf: float, target_conf: float, pred_box, target_box, is_positive: bool,
                alpha: float = DEFAULT_ALPHA) -> float:
    """Loss of a single anchor; boxes are xyxy."""
    val = (float(pred_conf) - float(target_conf)) ** 2
    if is_positive:
        val += alpha * ciou_loss(pred_box, target_box)
    return val


@dataclass
class ImageTargets:
    """Per-image training targets derived from its gt boxes."""

    assignment: AnchorAssignment
    gt_xyxy: np.ndarray  # [4, h, w]
    n_norm: float

    @property
    def labels(self) -> np.ndarray:
        return self.assignment.labels

    @property
    def n_objects(self) -> int:
        return self.assignment.n_objects


def build_targets(gt_boxes, grid_shape, n_fixed: float = DEFAULT_N_FIXED) -> ImageTargets:
    asg = assign_anchors(gt_boxes, grid_shape)
    n = float(asg.n_positive) if asg.n_objects else float(n_fixed)
    return ImageTargets(assignment=asg, gt_xyxy=target_boxes(gt_boxes, asg), n_norm=n)


@dataclass
class LossBreakdown:
    negative_loss: float
    per_object_losses: list
    normalizer: float
    total: float
    conf_sum: float = 0.0  # confidence loss over every anchor
    reg_sum: float = 0.0  # CIoU over positive anchors
    alpha: float = DEFAULT_ALPHA
    anchor_losses: Optional[np.ndarray] = field(default=None, repr=False)  # [h, w]
    labels: Optional[np.ndarray] = field(default=None, repr=False)
    loss_map: Optional[Tensor] = field(default=None, repr=False)  # [h, w] on the tape
    positive_counts: list = field(default_factory=list)

    @property
    def grouped_total(self) -> float:
        return (self.negative_loss + sum(self.per_object_losses)) / self.normalizer

    @property
    def per_object_mean_losses(self) -> list:
        return [l / max(c, 1) for l, c in zip(self.per_object_losses, self.positive_counts)]

    def weighted_value(self, v: Sequence[float]) -> float:
        if len(v) != len(self.per_object_losses):
            raise ValueError(f"{len(v)} weights for {len(self.per_object_losses)} objects")
        return (self.negative_loss + float(np.dot(v, self.per_object_losses))) / self.normalizer


def anchor_loss_map(output: ModelOutput, targets: Sequence[ImageTargets],
                    alpha: float = DEFAULT_ALPHA) -> tuple:
    """Batched per-anchor losses.

    Returns ``(loss_map, conf_part, reg_part)`` where ``loss_map`` is a [B, h, w]
    tensor on the tape and the parts are float64 arrays for bookkeeping.
    """
    B, gh, gw = output.conf.shape
    if len(targets) != B:
        raise ValueError(f"{len(targets)} targets for a batch of {B}")
    pos = np.stack([t.labels >= 0 for t in targets]).astype(np.float32)
    gt = np.stack([t.gt_xyxy for t in targets], axis=1).astype(np.float32)  # [4, B, h, w]
    cx, cy = anchor_centers((gh, gw))
    cx = np.broadcast_to(cx, (B, gh, gw)).astype(np.float32)
    cy = np.broadcast_to(cy, (B, gh, gw)).astype(np.float32)
    box = output.box
    l, t, r, b = (box[:, k] for k in range(4))
    px1 = ag.sub(cx, l)
    py1 = ag.sub(cy, t)
    px2 = ag.add(r, cx)
    py2 = ag.add(b, cy)
    reg = ciou_terms(px1, py1, px2, py2, gt[0], gt[1], gt[2], gt[3])
    conf_l = ag.square(ag.sub(output.conf, pos))
    loss_map = conf_l + reg * (pos * np.float32(alpha))
    return loss_map, conf_l.data.astype(np.float64), reg.data.astype(np.float64) * pos


def breakdowns(loss_map: Tensor, conf_part: np.ndarray, reg_part: np.ndarray,
               targets: Sequence[ImageTargets], alpha: float) -> list:
    """Per-image LossBreakdown; the anchor-sum and object-grouped totals are computed separately."""
    out = []
    full = loss_map.data.astype(np.float64)
    for i, tg in enumerate(targets):
        labels = tg.labels
        al = conf_part[i] + alpha * reg_part[i]
        neg = float(al[labels < 0].sum())
        n = tg.n_objects
        flat = labels.reshape(-1)
        per_obj = np.zeros(n)
        counts = np.zeros(n, dtype=np.int64)
        if n:
            sel = flat >= 0
            per_obj = np.bincount(flat[sel], weights=al.reshape(-1)[sel], minlength=n)
            counts = np.bincount(flat[sel], minlength=n)
        conf_sum = float(conf_part[i].sum())
        reg_sum = float(reg_part[i].sum())
        total = (conf_sum + alpha * reg_sum) / tg.n_norm
        out.append(LossBreakdown(negative_loss=neg, per_object_losses=[float(x) for x in per_obj],
                                 normalizer=tg.n_norm, total=total, conf_sum=conf_sum,
                                 reg_sum=reg_sum, alpha=alpha, anchor_losses=full[i],
                                 labels=labels, loss_map=loss_map[i],
                                 positive_counts=[int(c) for c in counts]))
    return out


def total_loss(output: ModelOutput, targets, alpha: float = DEFAULT_ALPHA,
               n_fixed: float = DEFAULT_N_FIXED) -> list:
    """Per-image breakdowns for a batched output.

    ``targets`` is a list of ImageTargets, or a list of gt-box lists that are
    assigned here with ``n_fixed``.
    """
    targets = _as_targets(output, targets, n_fixed)
    loss_map, conf_part, reg_part = anchor_loss_map(output, targets, alpha)
    return breakdowns(loss_map, conf_part, reg_part, targets, alpha)


def _as_targets(output, targets, n_fixed):
    grid = output.conf.shape[1:]
    if targets and not isinstance(targets[0], ImageTargets):
        targets = [build_targets(b, grid, n_fixed) for b in targets]
    return list(targets)


def weight_map(labels: np.ndarray, v: Sequence[float]) -> np.ndarray:
    """1 on negative anchors, v[i] on anchors of object i."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    wm = np.ones(labels.shape, dtype=np.float64)
    pos = labels >= 0
    if pos.any():
        wm[pos] = v[labels[pos]]
    return wm


def weighted_total_loss(breakdown: LossBreakdown, v: Sequence[float]) -> Tensor:
    """(negative loss + sum_i v_i * object loss_i) / N as a differentiable scalar.

    The weights are constants; the negative-anchor term is never weighted.
    """
    n = len(breakdown.per_object_losses)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if len(v) != n:
        raise ValueError(f"{len(v)} weights for {n} objects")
    if ((v < 0) | (v > 1)).any():
        raise ValueError("weights must lie in [0, 1]")
    coef = (weight_map(breakdown.labels, v) / breakdown.normalizer).astype(np.float32)
    return ag.tsum(ag.mul(breakdown.loss_map, coef))


def batch_objective(loss_map: Tensor, targets: Sequence[ImageTargets], weights: Sequence) -> Tensor:
    """Mean over the batch of each image's weighted total loss."""
    B = len(targets)
    coef = np.stack([weight_map(t.labels, w) / t.n_norm for t, w in zip(targets, weights)])
    coef = (coef / B).astype(np.float32)
    return ag.tsum(ag.mul(loss_map, coef))
