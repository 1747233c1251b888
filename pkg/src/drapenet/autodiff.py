"""Reverse-mode differentiation over the closed op set the regressors need.

The supported operations are exactly the public functions of this module:
dense/sparse matrix products, elementwise add/subtract/scale, leaky
rectifier, channel concatenation, reshape, first-axis indexing, and the
three scalar losses (displacement, squared-norm, collision). Anything
outside this set is intentionally not expressible on the tape.

Values are float64 throughout; gradients are validated against central
finite differences in the test suite.
"""
from __future__ import annotations

import numpy as np

from .mesh import SparseMatrix


class Var:
    """A value on the differentiation tape.

    Leaves created with requires_grad=True receive accumulated gradients
    after backward(); interior nodes track their parents so the reverse
    sweep can reach every contributing leaf.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_bw")

    def __init__(self, value, requires_grad: bool = False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, grad={self.grad is not None})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents, bw) -> Var:
    """Wrap an op result; record the backward rule only if a leaf needs it."""
    out = Var(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
    return out


def _acc(var: Var, g):
    if not var.requires_grad:
        return
    var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g, shape):
    """Sum a gradient back down to the shape the operand had before broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural ops

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(-g, b.value.shape))

    return _make(a.value - b.value, (a, b), bw)


def scale(x, s: float) -> Var:
    x = as_var(x)
    s = float(s)

    def bw(g):
        _acc(x, g * s)

    return _make(x.value * s, (x,), bw)


def leaky_relu(x, slope: float = 0.1) -> Var:
    x = as_var(x)
    pos = x.value > 0

    def bw(g):
        _acc(x, g * np.where(pos, 1.0, slope))

    return _make(np.where(pos, x.value, slope * x.value), (x,), bw)


def relu(x) -> Var:
    return leaky_relu(x, 0.0)


def concat(parts, axis: int = 1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes[:-1])

    def bw(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _acc(p, piece)

    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, bw)


def reshape(x, shape) -> Var:
    x = as_var(x)
    in_shape = x.value.shape

    def bw(g):
        _acc(x, g.reshape(in_shape))

    return _make(x.value.reshape(shape), (x,), bw)


def index_axis0(t, k: int) -> Var:
    """Select slice k along the first axis (e.g. one Chebyshev coefficient)."""
    t = as_var(t)
    k = int(k)
    if not 0 <= k < t.value.shape[0]:
        raise IndexError(f"index {k} out of range for axis of size {t.value.shape[0]}")

    def bw(g):
        full = np.zeros_like(t.value)
        full[k] = g
        _acc(t, full)

    return _make(t.value[k], (t,), bw)


# ---------------------------------------------------------------------------
# Matrix products

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")

    def bw(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return _make(a.value @ b.value, (a, b), bw)


def spmm(sp: SparseMatrix, x) -> Var:
    """Sparse constant matrix times dense tape value (Laplacian, pool, unpool)."""
    x = as_var(x)
    if sp.cols != x.value.shape[0]:
        raise ValueError(f"spmm shape mismatch: {sp.shape} @ {x.value.shape}")

    def bw(g):
        _acc(x, sp.transpose() @ g)

    return _make(sp @ x.value, (x,), bw)


# ---------------------------------------------------------------------------
# Scalar losses

def sum_squares(x) -> Var:
    x = as_var(x)

    def bw(g):
        _acc(x, (2.0 * float(g)) * x.value)

    return _make(np.float64((x.value ** 2).sum()), (x,), bw)


def l2_displacement_loss(pred, gt) -> Var:
    """Mean over vertices of the squared Euclidean prediction error."""
    pred = as_var(pred)
    gt_val = gt.value if isinstance(gt, Var) else np.asarray(gt, dtype=np.float64)
    if pred.value.shape != gt_val.shape:
        raise ValueError(f"loss shape mismatch: {pred.value.shape} vs {gt_val.shape}")
    n = pred.value.shape[0]
    diff = pred.value - gt_val

    def bw(g):
        _acc(pred, (2.0 * float(g) / n) * diff)

    return _make(np.float64((diff ** 2).sum() / n), (pred,), bw)


def collision_loss(garment_verts, body_verts, body_normals, correspondence) -> Var:
    """Mean rectified penetration depth against matched body points.

    Each garment vertex i is paired with body vertex correspondence[i]; the
    contribution is max(-n_k . (v_i - v_k), 0), zero when the vertex sits on
    or outside the body surface along the local normal.
    """
    v = as_var(garment_verts)
    bv = np.asarray(body_verts, dtype=np.float64)
    bn = np.asarray(body_normals, dtype=np.float64)
    corr = np.asarray(correspondence, dtype=np.int64)
    if corr.min(initial=0) < 0 or corr.max(initial=-1) >= len(bv):
        raise IndexError("correspondence index out of range")
    if len(corr) != len(v.value):
        raise ValueError("one correspondence entry per garment vertex required")

    n = len(corr)
    nk = bn[corr]
    d = ((v.value - bv[corr]) * nk).sum(axis=1)
    inside = d < 0

    def bw(g):
        dv = np.where(inside[:, None], -nk, 0.0) * (float(g) / n)
        _acc(v, dv)

    return _make(np.float64(np.maximum(-d, 0.0).sum() / n), (v,), bw)


# ---------------------------------------------------------------------------
# Reverse sweep

def backward(loss: Var):
    """Accumulate gradients of a scalar loss into every requiring leaf."""
    if loss.value.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)
