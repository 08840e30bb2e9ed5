"""Tiny one-category anchor-point detector.

conv3x3(C_in->8) -> relu -> avgpool2 -> conv3x3(8->16) -> relu
-> conv3x3(16->16) -> relu -> {conv1x1(16->1) + sigmoid, conv1x1(16->4)}

Anchors sit on the half-resolution output grid: anchor (i, j) is centred at
pixel coordinates (2j + 1, 2i + 1). The box head predicts distances from
the anchor centre to the left, top, right and bottom box sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

STRIDE = 2
SHRINK = 0.5
# box distances are BOX_SCALE * sigmoid(raw), so they are non-negative and bounded
BOX_SCALE = 32.0
INIT_STD = 0.1
# subtracted from every input pixel; the synthetic background sits near this level,
# so background regions give near-zero first-layer activations
INPUT_CENTER = 0.25
# initial confidence everywhere; starting near the background answer keeps the
# thousand-odd negative anchors per image from swamping the first updates
CONF_PRIOR = 0.01

LAYERS = (
    # name, out, in(None = C_in), k
    ("conv1", 8, None, 3),
    ("conv2", 16, 8, 3),
    ("conv3", 16, 16, 3),
    ("conf", 1, 16, 1),
    ("box", 4, 16, 1),
)


def weight_shapes(c_in: int = 1) -> dict:
    shapes = {}
    for name, c_out, cin, k in LAYERS:
        cin = c_in if cin is None else cin
        shapes[f"{name}.w"] = (c_out, cin, k, k)
        shapes[f"{name}.b"] = (c_out,)
    return shapes


def init_weights(seed: int, c_in: int = 1, std: float = INIT_STD, conf_prior: float = CONF_PRIOR) -> dict:
    """Gaussian init N(0, std^2) for every parameter, biases included.

    The confidence bias is then set to logit(conf_prior), so an untrained
    model predicts ``conf_prior`` at every anchor (up to the head weights).
    Pass ``conf_prior=None`` to keep the Gaussian draw for that bias too.
    """
    rng = np.random.default_rng(int(seed))
    weights = {name: Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
               for name, shape in weight_shapes(c_in).items()}
    if conf_prior is not None:
        if not 0.0 < conf_prior < 1.0:
            raise ValueError(f"conf_prior must lie in (0, 1), got {conf_prior}")
        weights["conf.b"].data[:] = np.log(conf_prior / (1.0 - conf_prior))
    return weights


def clone_weights(weights: dict) -> dict:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in weights.items()}


def check_weights(weights: dict, c_in: int) -> None:
    expected = weight_shapes(c_in)
    if set(weights) != set(expected):
        raise ValueError(f"weight names {sorted(weights)} do not match architecture {sorted(expected)}")
    for k, shape in expected.items():
        if tuple(weights[k].shape) != shape:
            raise ag.ShapeError(f"weights[{k}]", weights[k].shape, shape)


def weights_checksum(weights: dict) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(weights):
        h.update(k.encode())
        h.update(np.ascontiguousarray(weights[k].data).tobytes())
    return h.hexdigest()


@dataclass
class ModelOutput:
    conf: Tensor  # [N, h, w], values in (0, 1)
    box: Tensor  # [N, 4, h, w], (l, t, r, b) >= 0 in input pixels

    @property
    def conf_map(self) -> np.ndarray:
        return self.conf.data

    @property
    def box_map(self) -> np.ndarray:
        return self.box.data


def forward(weights: dict, images) -> ModelOutput:
    """Run the detector on [C, H, W] or batched [N, C, H, W] images."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    x = ag.sub(x, INPUT_CENTER)
    if x.ndim == 3:
        x = ag.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ag.ShapeError("forward", x.shape, ("N", "C", "H", "W"))
    N, C, H, W = x.shape
    c_in = weights["conv1.w"].shape[1]
    if C != c_in:
        raise ag.ShapeError("forward", x.shape, weights["conv1.w"].shape)
    if H % 2 or W % 2:
        raise ag.ShapeError("forward", x.shape, ("even H", "even W"))

    h = ag.relu(ag.conv2d(x, weights["conv1.w"], 1, weights["conv1.b"]))
    h = ag.avgpool2(h)
    h = ag.relu(ag.conv2d(h, weights["conv2.w"], 1, weights["conv2.b"]))
    h = ag.relu(ag.conv2d(h, weights["conv3.w"], 1, weights["conv3.b"]))
    conf = ag.sigmoid(ag.conv2d(h, weights["conf.w"], 0, weights["conf.b"]))
    conf = ag.reshape(conf, (N, H // 2, W // 2))
    box = ag.mul(ag.sigmoid(ag.conv2d(h, weights["box.w"], 0, weights["box.b"])), BOX_SCALE)
    return ModelOutput(conf=conf, box=box)


# -- anchors -------------------------------------------------------------------------

def anchor_centers(grid_shape) -> tuple:
    """(cx, cy) arrays of shape grid_shape, in input pixels."""
    gh, gw = grid_shape
    cy, cx = np.mgrid[0:gh, 0:gw].astype(np.float64)
    return STRIDE * cx + STRIDE / 2, STRIDE * cy + STRIDE / 2


@dataclass
class AnchorAssignment:
    labels: np.ndarray  # [h, w] int: -1 negative, otherwise object index
    positives: list = field(default_factory=list)  # per object: flat anchor indices

    @property
    def n_objects(self) -> int:
        return len(self.positives)

    @property
    def n_positive(self) -> int:
        return int((self.labels >= 0).sum())

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels >= 0


def assign_anchors(gt_boxes, grid_shape, input_shape=None) -> AnchorAssignment:
    """Centre-shrink assignment.

    An anchor is positive for an object when its centre lies inside the box
    shrunk to its central 50%. Anchors inside several shrunk boxes go to the
    object with the nearest centre. An object that captures no anchor takes
    the nearest anchor not needed by another object.
    """
    gh, gw = grid_shape
    if input_shape is not None and tuple(input_shape) != (gh * STRIDE, gw * STRIDE):
        raise ValueError(f"grid {grid_shape} does not match input {input_shape} at stride {STRIDE}")
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    labels = np.full((gh, gw), -1, dtype=np.int64)
    if n == 0:
        return AnchorAssignment(labels=labels, positives=[])
    cx, cy = anchor_centers(grid_shape)
    bcx = (boxes[:, 0] + boxes[:, 2]) / 2
    bcy = (boxes[:, 1] + boxes[:, 3]) / 2
    hw = (boxes[:, 2] - boxes[:, 0]) * SHRINK / 2
    hh = (boxes[:, 3] - boxes[:, 1]) * SHRINK / 2
    best = np.full((gh, gw), np.inf)
    dist2 = np.empty((n, gh, gw))
    for i in range(n):
        dist2[i] = (cx - bcx[i]) ** 2 + (cy - bcy[i]) ** 2
        inside = ((cx >= bcx[i] - hw[i]) & (cx <= bcx[i] + hw[i])
                  & (cy >= bcy[i] - hh[i]) & (cy <= bcy[i] + hh[i]))
        take = inside & (dist2[i] < best)
        labels[take] = i
        best[take] = dist2[i][take]
    flat = labels.reshape(-1)
    for i in range(n):
        if (flat == i).any():
            continue
        counts = np.bincount(flat[flat >= 0], minlength=n)
        for a in np.argsort(dist2[i].reshape(-1), kind="stable"):
            owner = flat[a]
            if owner < 0 or counts[owner] > 1:
                flat[a] = i
                break
    positives = [np.flatnonzero(flat == i) for i in range(n)]
    return AnchorAssignment(labels=labels, positives=positives)


def encode_targets(gt_boxes, assignment: AnchorAssignment) -> np.ndarray:
    """[4, h, w] (l, t, r, b) targets; negative anchors get a unit placeholder."""
    gh, gw = assignment.labels.shape
    cx, cy = anchor_centers((gh, gw))
    out = np.ones((4, gh, gw), dtype=np.float64)
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    lab = assignment.labels
    pos = lab >= 0
    if pos.any():
        b = boxes[lab[pos]]
        out[0][pos] = cx[pos] - b[:, 0]
        out[1][pos] = cy[pos] - b[:, 1]
        out[2][pos] = b[:, 2] - cx[pos]
        out[3][pos] = b[:, 3] - cy[pos]
    return out


def target_boxes(gt_boxes, assignment: AnchorAssignment) -> np.ndarray:
    """[4, h, w] xyxy gt box per anchor; negatives get a placeholder 8x8 box at the anchor."""
    gh, gw = assignment.labels.shape
    cx, cy = anchor_centers((gh, gw))
    out = np.stack([cx - 4.0, cy - 4.0, cx + 4.0, cy + 4.0])
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pos = assignment.labels >= 0
    if pos.any():
        b = boxes[assignment.labels[pos]]
        for c in range(4):
            out[c][pos] = b[:, c]
    return out


def decode_offsets(offsets: np.ndarray, grid_shape) -> np.ndarray:
    """(l, t, r, b) maps [4, h, w] -> xyxy boxes [4, h, w]."""
    cx, cy = anchor_centers(grid_shape)
    l, t, r, b = offsets
    return np.stack([cx - l, cy - t, cx + r, cy + b])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = iou_matrix(boxes[order], boxes[order]) if len(order) else np.zeros((0, 0))
    for rank in range(len(order)):
        if suppressed[rank]:
            continue
        keep.append(order[rank])
        suppressed |= ious[rank] >= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def decode(conf_map, box_map, conf_threshold: float = 0.5, nms_iou: float = 0.5) -> list:
    """Turn one image's maps into [(box, score), ...] sorted by descending score."""
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    conf_map = np.asarray(conf_map, dtype=np.float64)
    box_map = np.asarray(box_map, dtype=np.float64)
    grid = conf_map.shape
    sel = conf_map >= conf_threshold
    if not sel.any():
        return []
    xyxy = decode_offsets(box_map, grid)
    boxes = np.stack([xyxy[c][sel] for c in range(4)], axis=1)
    scores = conf_map[sel]
    keep = nms(boxes, scores, nms_iou)
    return [(tuple(float(v) for v in boxes[k]), float(scores[k])) for k in keep]


def decode_output(output: ModelOutput, conf_threshold: float = 0.5, nms_iou: float = 0.5) -> list:
    """Per-image detection lists for a batched ModelOutput."""
    conf, box = output.conf_map, output.box_map
    return [decode(conf[i], box[i], conf_threshold, nms_iou) for i in range(conf.shape[0])]
