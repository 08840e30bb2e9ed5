"""Detection evaluation: greedy matching, 11-point interpolated AP and FDR.

Detections are pooled over a split, sorted globally by score and matched per
image. AP is reported at IoU 0.5, 0.75 and as the mean over 0.50:0.05:0.95.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .detector import decode_output, forward, iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 11)


def match_detections(det_boxes, gt_boxes, iou_threshold: float) -> np.ndarray:
    """TP flags for detections sorted by descending score.

    Each detection takes the still-unmatched gt with the highest IoU, provided
    that IoU reaches the threshold.
    """
    det = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    tp = np.zeros(len(det), dtype=bool)
    if len(det) == 0 or len(gt) == 0:
        return tp
    ious = iou_matrix(det, gt)
    free = np.ones(len(gt), dtype=bool)
    for d in range(len(det)):
        cand = np.where(free, ious[d], -1.0)
        g = int(np.argmax(cand))
        if cand[g] >= iou_threshold:
            tp[d] = True
            free[g] = False
    return tp


def precision_recall(tp_flags, scores, n_gt: int) -> tuple:
    """(precision, recall) at every distinct score cutoff, highest cutoff first.

    Detections with equal scores enter together, since no threshold can
    separate them; the curve therefore does not depend on input order.
    """
    tp = np.asarray(tp_flags, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    tp, s = tp[order], s[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True)) if s.size else np.zeros(0, dtype=np.int64)
    ctp, cfp = ctp[ends], cfp[ends]
    prec = ctp / np.maximum(ctp + cfp, 1)
    rec = ctp / n_gt if n_gt > 0 else np.zeros_like(prec, dtype=np.float64)
    return prec, rec


def voc07_ap(tp_flags, scores, n_gt: int) -> float:
    """Mean over recall points 0, 0.1, ..., 1 of the best precision at recall >= point.

    With no ground truth the AP is 1 when there are no detections and 0 otherwise.
    """
    tp = np.asarray(tp_flags, dtype=bool)
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    prec, rec = precision_recall(tp, scores, n_gt)
    total = 0.0
    for r in RECALL_POINTS:
        sel = rec >= r - 1e-12
        total += prec[sel].max() if sel.any() else 0.0
    return float(total / len(RECALL_POINTS))


def fdr(tp_flags) -> float:
    """False detections over all detections; 0 with no detections."""
    tp = np.asarray(tp_flags, dtype=bool)
    return float((~tp).sum() / tp.size) if tp.size else 0.0


@dataclass
class EvalResult:
    ap50: float
    ap75: float
    ap: float
    fdr: float
    per_threshold: dict = field(default_factory=dict)  # iou -> AP
    curves: dict = field(default_factory=dict)  # iou -> (precision, recall)
    n_detections: int = 0
    n_gt: int = 0
    conf_threshold: float = 0.5
    nms_iou: float = 0.5

    def to_dict(self, curves: bool = False) -> dict:
        d = {"ap50": self.ap50, "ap75": self.ap75, "ap": self.ap, "fdr": self.fdr,
             "per_threshold": {f"{k:.2f}": v for k, v in self.per_threshold.items()},
             "n_detections": self.n_detections, "n_gt": self.n_gt,
             "conf_threshold": self.conf_threshold, "nms_iou": self.nms_iou}
        if curves:
            d["curves"] = {f"{k:.2f}": {"precision": p.tolist(), "recall": r.tolist()}
                           for k, (p, r) in self.curves.items()}
        return d


def evaluate_detections(detections: list, gt_boxes: list, conf_threshold: float = 0.5,
                        nms_iou: float = 0.5) -> EvalResult:
    """Evaluate per-image detection lists ``[(box, score), ...]`` against gt boxes."""
    if len(detections) != len(gt_boxes):
        raise ValueError(f"{len(detections)} detection lists for {len(gt_boxes)} images")
    n_gt = sum(len(g) for g in gt_boxes)
    scores = np.array([s for dets in detections for _, s in dets], dtype=np.float64)
    per_thr, curves, flags = {}, {}, {}
    for thr in IOU_THRESHOLDS:
        tp = []
        for dets, gts in zip(detections, gt_boxes):
            boxes = [b for b, _ in dets]
            tp.append(match_detections(boxes, gts, thr))
        tp = np.concatenate(tp) if tp else np.zeros(0, dtype=bool)
        flags[thr] = tp
        per_thr[thr] = voc07_ap(tp, scores, n_gt)
        if tp.size:
            curves[thr] = precision_recall(tp, scores, n_gt)
    return EvalResult(ap50=per_thr[0.5], ap75=per_thr[0.75],
                      ap=float(np.mean([per_thr[t] for t in IOU_THRESHOLDS])),
                      fdr=fdr(flags[0.5]), per_threshold=per_thr, curves=curves,
                      n_detections=int(scores.size), n_gt=n_gt,
                      conf_threshold=conf_threshold, nms_iou=nms_iou)


def predict(weights: dict, images: np.ndarray, conf_threshold: float = 0.5, nms_iou: float = 0.5,
            batch_size: int = 32) -> list:
    """Decoded detections per image, without recording on any tape."""
    frozen = {k: ag.Tensor(v.data if isinstance(v, ag.Tensor) else v) for k, v in weights.items()}
    out = []
    for start in range(0, len(images), batch_size):
        res = forward(frozen, images[start:start + batch_size])
        out.extend(decode_output(res, conf_threshold, nms_iou))
    return out


def evaluate(weights: dict, dataset, conf_threshold: float = 0.5, nms_iou: float = 0.5) -> EvalResult:
    """Run the detector over a dataset and evaluate against its gt boxes."""
    if len(dataset.scenes) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    dets = predict(weights, dataset.images(), conf_threshold, nms_iou)
    return evaluate_detections(dets, [s.gt_boxes for s in dataset.scenes], conf_threshold, nms_iou)
