"""Sample-weighting primitives: minimizer functions, threshold schedules, and
per-object confidence statistics.

Loss-based minimizers map a per-object loss ``l`` and age ``lam`` to a weight:

    hard        1                          if l < lam
    linear      1 - l / lam                if l < lam
    log         log(l + z) / log(z)        if l < lam, z = 1 - lam, 0 < lam < 1
    poly        (1 - l / lam)^(1/(t-1))    if l < lam, t > 1

and 0 otherwise. The confidence-based minimizer maps a confidence ``c`` and
threshold ``xi`` to ``c^(1/m)`` if ``c > xi`` and 0 otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

LOSS_KINDS = ("hard", "linear", "log", "poly")
CONF_KIND = "conf"
KINDS = LOSS_KINDS + (CONF_KIND,)


@dataclass(frozen=True)
class MinimizerSpec:
    kind: str
    t: float = 3.0  # polynomial order
    m: int = 3  # confidence root

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown minimizer kind {self.kind!r}")
        if self.kind == "poly" and not self.t > 1:
            raise ValueError(f"polynomial minimizer needs t > 1, got {self.t}")
        if self.kind == CONF_KIND and (int(self.m) != self.m or self.m < 1):
            raise ValueError(f"confidence minimizer needs a positive integer m, got {self.m}")

    @property
    def loss_based(self) -> bool:
        return self.kind in LOSS_KINDS


def _check_domain(spec: MinimizerSpec, threshold: float, stat: np.ndarray) -> None:
    if not np.isfinite(stat).all():
        raise ValueError("statistic must be finite")
    if spec.kind == CONF_KIND:
        if ((stat < 0) | (stat > 1)).any():
            raise ValueError("confidences must lie in [0, 1]")
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"confidence threshold must lie in [0, 1], got {threshold}")
        return
    if (stat < 0).any():
        raise ValueError("losses must be >= 0")
    if spec.kind == "log":
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"logarithmic minimizer needs 0 < lambda < 1, got {threshold}")
    elif not threshold > 0:
        raise ValueError(f"lambda must be > 0, got {threshold}")


def minimizer_weights(spec: MinimizerSpec, threshold: float, stats) -> np.ndarray:
    """Vectorised minimizer: one weight in [0, 1] per statistic."""
    s = np.asarray(stats, dtype=np.float64)
    _check_domain(spec, threshold, s)
    out = np.zeros_like(s)
    if spec.kind == CONF_KIND:
        sel = s > threshold
        out[sel] = s[sel] ** (1.0 / spec.m)
        return out
    sel = s < threshold
    ls = s[sel]
    if spec.kind == "hard":
        out[sel] = 1.0
    elif spec.kind == "linear":
        out[sel] = 1.0 - ls / threshold
    elif spec.kind == "log":
        zeta = 1.0 - threshold
        out[sel] = np.log(ls + zeta) / math.log(zeta)
    else:
        out[sel] = (1.0 - ls / threshold) ** (1.0 / (spec.t - 1.0))
    return np.clip(out, 0.0, 1.0)


def minimizer_value(spec: MinimizerSpec, threshold: float, statistic: float) -> float:
    return float(minimizer_weights(spec, threshold, [statistic])[0])


def regularizer(kind: str, v, lam: float, t: float = 3.0):
    """Explicit self-paced regularizer g(v, lam) for the loss-based kinds."""
    v = np.asarray(v, dtype=np.float64)
    if kind == "hard":
        return -lam * v
    if kind == "linear":
        return 0.5 * lam * (v * v - 2.0 * v)
    if kind == "log":
        zeta = 1.0 - lam
        return zeta * v - zeta ** v / math.log(zeta)
    if kind == "poly":
        return lam * (v ** t / t - v)
    raise ValueError(f"no explicit regularizer for {kind!r}")


@dataclass(frozen=True)
class ScheduleSpec:
    xi0: float = 0.8
    e1: float = 0.1
    e2: float = 0.9
    # quantile ramp for the loss-based age parameter
    q_start: float = 0.5
    q_end: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.xi0 <= 1.0:
            raise ValueError(f"xi0 must lie in (0, 1], got {self.xi0}")
        # e1 == e2 is allowed: the ramp is empty and the schedule is a step
        if not 0.0 <= self.e1 <= self.e2 <= 1.0:
            raise ValueError(f"need 0 <= e1 <= e2 <= 1, got e1={self.e1}, e2={self.e2}")
        if not 0.0 < self.q_start <= 1.0 or not 0.0 < self.q_end <= 1.0:
            raise ValueError("quantiles must lie in (0, 1]")


def _ramp(ep: float, e1: float, e2: float) -> float:
    """0 before e1, linear to 1 at e2, 1 after."""
    if ep < e1:
        return 0.0
    if ep >= e2:
        return 1.0
    return (ep - e1) / (e2 - e1)


def schedule_xi(spec: ScheduleSpec, ep: float) -> float:
    """Confidence threshold for training progress ``ep`` in [0, 1]."""
    if not 0.0 <= ep <= 1.0:
        raise ValueError(f"training progress must lie in [0, 1], got {ep}")
    if ep < spec.e1:
        return spec.xi0
    if ep < spec.e2:
        # written as 1 - fraction so that ep == e1 returns xi0 exactly; every
        # rounded step is monotone, so the ramp stays non-increasing
        return spec.xi0 * (1.0 - (ep - spec.e1) / (spec.e2 - spec.e1))
    return 0.0


def schedule_quantile(spec: ScheduleSpec, ep: float) -> float:
    return spec.q_start + (spec.q_end - spec.q_start) * _ramp(ep, spec.e1, spec.e2)


def quantile_threshold(losses, q: float) -> float:
    """Age parameter that admits exactly ceil(q * n) of ``losses`` under ``l < lam``.

    The threshold sits halfway between the k-th and (k+1)-th smallest loss,
    or a little above the largest when every loss is admitted. Tied losses
    at the boundary can admit fewer.
    """
    s = np.sort(np.asarray(losses, dtype=np.float64).reshape(-1))
    n = len(s)
    if n == 0:
        return 1.0
    k = min(max(int(math.ceil(q * n - 1e-12)), 1), n)
    if k < n:
        mid = 0.5 * (s[k - 1] + s[k])
        # adjacent subnormals can round the midpoint down onto the k-th loss
        return float(mid if mid > s[k - 1] else s[k])
    top = s[-1]
    return float(top + max(abs(top) * 1e-3, 1e-9))


# -- per-object statistics ---------------------------------------------------------

def object_confidences(conf_map: np.ndarray, labels: np.ndarray, n_objects: int,
                       mode: str = "max") -> np.ndarray:
    """Aggregate predicted confidence over each object's positive anchors."""
    if n_objects == 0:
        return np.zeros(0)
    flat = labels.reshape(-1)
    c = np.asarray(conf_map, dtype=np.float64).reshape(-1)
    sel = flat >= 0
    idx, vals = flat[sel], c[sel]
    counts = np.bincount(idx, minlength=n_objects)
    if (counts[:n_objects] == 0).any():
        missing = int(np.flatnonzero(counts[:n_objects] == 0)[0])
        raise ValueError(f"object {missing} has no positive anchors")
    if mode == "max":
        out = np.full(n_objects, -np.inf)
        np.maximum.at(out, idx, vals)
        return out
    if mode == "mean":
        return np.bincount(idx, weights=vals, minlength=n_objects) / counts
    raise ValueError(f"unknown confidence aggregation {mode!r}")


def object_confidence(output, assignment, object_index: int, mode: str = "max", image: int = 0) -> float:
    """Confidence of one object from a ModelOutput (or a bare [h, w] map)."""
    conf = output.conf_map[image] if hasattr(output, "conf_map") else np.asarray(output)
    n = assignment.n_objects
    if not 0 <= object_index < n:
        raise IndexError(f"object {object_index} out of range for {n} objects")
    return float(object_confidences(conf, assignment.labels, n, mode)[object_index])


def cross_weights(conf_from_peer: Sequence[float], xi: float, m: int = 3) -> list:
    """Weights for one model computed from its peer's per-object confidences."""
    if len(conf_from_peer) == 0:
        return []
    return [float(w) for w in minimizer_weights(MinimizerSpec(CONF_KIND, m=m), xi, conf_from_peer)]


def selection_replay(confidences: Sequence[float], spec: ScheduleSpec, epochs: int,
                     m: int = 3) -> list:
    """Boolean nonzero-weight masks per epoch for frozen confidences.

    Epoch t (1-based) uses the threshold at progress (t - 1) / epochs.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    spec_m = MinimizerSpec(CONF_KIND, m=m)
    masks = []
    for t in range(1, epochs + 1):
        xi = schedule_xi(spec, (t - 1) / epochs)
        masks.append(minimizer_weights(spec_m, xi, conf) > 0)
    return masks
