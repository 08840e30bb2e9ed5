"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import DTYPE, ShapeError, Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to :class:`Tensor`; ``grads`` maps the same names to
    arrays (a missing or ``None`` gradient counts as zero).
    """
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.step += 1
    t = state.step
    b1 = DTYPE(BETA1)
    b2 = DTYPE(BETA2)
    c1 = DTYPE(1.0 - BETA1 ** t)
    c2 = DTYPE(1.0 - BETA2 ** t)
    lr32 = DTYPE(lr)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step({name})", p.shape, g.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr32 * (m / c1) / (np.sqrt(v / c2) + DTYPE(EPS))
    return state


def collect_grads(params: dict) -> dict:
    return {k: p.grad for k, p in params.items()}


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


__all__ = ["AdamState", "adam_step", "collect_grads", "zero_grads", "Tensor"]
