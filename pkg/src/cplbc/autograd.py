"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable primitive records one node on the active :class:`Tape`.
Nodes are appended in creation order, so replaying a tape in reverse is a
valid topological order for the backward pass.

Only two broadcasting forms are supported: equal shapes, and a scalar (a
Python number or a one-element tensor) against a tensor of any shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

DTYPE = np.float32
PROTECT_EPS = 1e-12

Number = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""

    def __init__(self, op: str, phase: str):
        super().__init__(f"non-finite value produced by '{op}' during {phase}")
        self.op = op
        self.phase = phase


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of primitive operations.

    A tape may be backpropagated once; afterwards it is consumed and further
    ``backward`` calls on losses recorded on it raise :class:`TapeError`.
    Use it as a context manager to give a forward pass its own tape.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def record(self, node: "Tensor") -> None:
        node._seq = len(self.nodes)
        node._tape = self
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _local_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _local_stack()
        stack.remove(self)
        return False


_local = threading.local()


def _local_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape:
    stack = _local_stack()
    if stack:
        return stack[-1]
    default = getattr(_local, "default", None)
    if default is None or default.consumed:
        default = Tape()
        _local.default = default
    return default


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_tape", "_seq")
    # make numpy defer to the reflected operators (ndarray - Tensor -> Tensor.__rsub__)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._tape: Optional[Tape] = None
        self._seq = -1

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(a: np.ndarray) -> bool:
    # a finite sum implies every element is finite; overflow falls back to the exact test
    if np.isfinite(a.sum()):
        return True
    return bool(np.isfinite(a).all())


def _tape_for(parents) -> Tape:
    """A derived tensor joins its parents' live tape, else the active one."""
    for p in parents:
        t = p._tape
        if t is not None and not t.consumed:
            return t
    return current_tape()


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap a forward result, check it, and record it on the active tape."""
    if not _all_finite(data):
        raise NonFiniteError(op, "forward")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.op = op
    out._tape = None
    out._seq = -1
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        _tape_for(parents).record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _scalar_like(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return a.shape
    if _scalar_like(b):
        return a.shape
    if _scalar_like(a):
        return b.shape
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    if grad.shape == t.shape:
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(t.shape)


# -- elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return _make(out, (a, b), backward, "mul")


def _protect(d: np.ndarray) -> np.ndarray:
    small = np.abs(d) < PROTECT_EPS
    if small.any():
        d = np.where(small, np.where(d < 0, -PROTECT_EPS, PROTECT_EPS), d)
    return d, small


def div(a, b) -> Tensor:
    """Protected division: denominators with magnitude below 1e-12 are clamped.

    Clamped denominators are constants for the backward pass.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    ad = a.data.astype(np.float64)
    bd, small = _protect(b.data.astype(np.float64))
    out = ad / bd

    def backward(g):
        g64 = g.astype(np.float64)
        ga = g64 / bd
        gb = -g64 * ad / (bd * bd)
        if small.any():
            gb = np.where(small, 0.0, gb)
        return _reduce_to(ga.astype(DTYPE), a), _reduce_to(gb.astype(DTYPE), b)

    return _make(out.astype(DTYPE), (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, DTYPE(0))

    def backward(g):
        return (g * (out > 0),)

    return _make(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)

    def backward(g):
        return (g * out * (1 - out),)

    return _make(out, (x,), backward, "sigmoid")


def square(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g * 2 * xd,)

    return _make(xd * xd, (x,), backward, "square")


def sqrt(x: Tensor) -> Tensor:
    """Protected square root: inputs below 1e-12 are clamped (zero gradient)."""
    clamped = x.data < PROTECT_EPS
    out = np.sqrt(np.maximum(x.data.astype(np.float64), PROTECT_EPS))

    def backward(g):
        gx = np.where(clamped, 0.0, g / (2.0 * out))
        return (gx.astype(DTYPE),)

    return _make(out.astype(DTYPE), (x,), backward, "sqrt")


def atan(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g / (1 + xd * xd),)

    return _make(np.arctan(xd), (x,), backward, "atan")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "sqrt": sqrt,
    "atan": atan,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


def minimum(a, b) -> Tensor:
    """min(a, b) = a - relu(a - b)."""
    return sub(a, relu(sub(a, b)))


def maximum(a, b) -> Tensor:
    """max(a, b) = b + relu(a - b)."""
    return add(b, relu(sub(a, b)))


# -- shape and reduction -------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.full(shape, g.reshape(-1)[0], dtype=DTYPE),)

    return _make(np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE), (x,), backward, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = np.ascontiguousarray(x.data[index])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make(out, (x,), backward, "getitem")


# -- spatial ---------------------------------------------------------------------------

def _batched(x: Tensor):
    if x.ndim == 3:
        return True
    if x.ndim == 4:
        return False
    raise ShapeError("conv2d", x.shape, ("C", "H", "W"))


def _im2col(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    """[N,C,H+k-1,W+k-1] -> [C*k*k, N*H*W]; column order (n, y, x)."""
    N, C = xp.shape[:2]
    cols = np.empty((C, k, k, N, H, W), dtype=DTYPE)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xp[:, :, dy:dy + H, dx:dx + W].transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, N * H * W)


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation.

    ``x`` is [C_in, H, W] or batched [N, C_in, H, W]; ``kernel`` is
    [C_out, C_in, k, k] with k odd; optional ``bias`` has shape [C_out].
    """
    single = _batched(x)
    xd = x.data[None] if single else x.data
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    C_out, C_in, k, _ = kernel.shape
    if k % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    N, C, H, W = xd.shape
    if C != C_in:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    if bias is not None and bias.shape != (C_out,):
        raise ShapeError("conv2d(bias)", bias.shape, (C_out,))
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d", x.shape, kernel.shape)

    if k == 1 and padding == 0:
        cols = xd.transpose(1, 0, 2, 3).reshape(C, N * H * W)
    else:
        if padding:
            xp = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=DTYPE)
            xp[:, :, padding:padding + H, padding:padding + W] = xd
        else:
            xp = xd
        cols = _im2col(xp, k, Ho, Wo)
    kmat = kernel.data.reshape(C_out, C_in * k * k)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(C_out, N, Ho, Wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if single else out)

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(C_out, N * Ho * Wo)
        gk = (gmat @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(C, k, k, N, Ho, Wo)
            if k == 1 and padding == 0:
                gxc = gcols.reshape(C, N, H, W)
            else:
                gxc = np.zeros((C, N, H + 2 * padding, W + 2 * padding), dtype=DTYPE)
                for dy in range(k):
                    for dx in range(k):
                        gxc[:, :, dy:dy + Ho, dx:dx + Wo] += gcols[:, dy, dx]
                gxc = gxc[:, :, padding:padding + H, padding:padding + W]
            gx = np.ascontiguousarray(gxc.transpose(1, 0, 2, 3))
            if single:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(gmat.sum(axis=1) if bias.requires_grad else None)
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv2d")


def avgpool2(x: Tensor) -> Tensor:
    """Stride-2 2x2 average pooling over the last two axes."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError("avgpool2", x.shape, ("even H", "even W"))
    xd = x.data
    q = DTYPE(0.25)
    out = (xd[..., 0::2, 0::2] + xd[..., 1::2, 0::2] + xd[..., 0::2, 1::2] + xd[..., 1::2, 1::2]) * q

    def backward(g):
        gq = g * q
        gx = np.empty(x.shape, dtype=DTYPE)
        gx[..., 0::2, 0::2] = gq
        gx[..., 1::2, 0::2] = gq
        gx[..., 0::2, 1::2] = gq
        gx[..., 1::2, 1::2] = gq
        return (gx,)

    return _make(out, (x,), backward, "avgpool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    lead = x.shape[:-2]
    H, W = x.shape[-2:]

    def backward(g):
        return (g.reshape(*lead, H, 2, W, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward, "upsample2")


# -- backward ----------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss into every ``requires_grad`` leaf.

    Leaf gradients accumulate into ``.grad``. The loss's tape is consumed.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, ())
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(loss.op, "backward")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    tape = loss._tape
    if tape is None:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if tape.consumed:
        raise TapeError("backward called twice on the same tape; rebuild the forward pass first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss._seq + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not _all_finite(pg):
                raise NonFiniteError(node.op, "backward")
            if parent._backward is None:
                pg = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    tape.consumed = True
    tape.nodes = []
