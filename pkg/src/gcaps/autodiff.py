"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 array together with an accumulated gradient.
Operations on tracked tensors record backward closures on their outputs;
the computation graph is the implicit DAG formed by ``_prev`` links, and
``Tensor.backward()`` runs one reverse topological sweep over it, adding
each node's contribution into its parents' ``grad`` arrays.

The op set is exactly what the capsule model, routing, attacks and the
feature generator need: no general broadcasting beyond elementwise ops,
no views, no in-place arithmetic on graph nodes.

All computation is double precision.  Norm divisions are guarded by
``NORM_EPS`` added to the squared norm, so ``l2_norm`` and ``squash``
are differentiable everywhere including the origin.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, GraphError, ShapeMismatchError

# Guard added to squared norms before sqrt; keeps norm-divisions finite at 0.
NORM_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_tensor(x) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    """Node in a computation graph: float64 values plus accumulated grad.

    ``grad`` is allocated lazily on first accumulation and has the same
    shape as ``data``.  Leaf tensors with ``requires_grad=True`` are the
    trainable parameters / attacked inputs; everything downstream of a
    tracked tensor is tracked automatically.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op",
                 "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, _children=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = _children
        self._op = _op
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` into the gradient buffer.

        ``owned=True`` means ``g`` is an array this node may keep: either
        freshly computed, or a view of a consumer's grad that nothing
        will read after the reverse sweep (fan-out-1 chains).  The common
        fan-out-1 case then skips a copy; on real fan-in a kept read-only
        view is materialized before accumulation.  After backward, a
        non-leaf's grad may therefore share memory with its consumer's.
        """
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=np.float64)
        else:
            if not self.grad.flags.writeable:
                self.grad = np.array(self.grad)
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from a scalar loss, accumulating into ``grad``.

        Each reachable node is visited exactly once, in reverse
        topological order; fan-out accumulates additively.  A second
        backward from the same root without rebuilding the graph is an
        error (closures assume fresh grad accumulation).
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_ran:
            raise GraphError("backward already ran on this graph; rebuild the graph "
                             "(rerun the forward pass) before differentiating again")
        self._backward_ran = True

        order = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _toposort(root: Tensor) -> list:
    """Iterative DFS topological order of the graph below ``root``."""
    order = []
    visited = set()
    stack = [(root, iter(root._prev))]
    visited.add(id(root))
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if id(child) not in visited:
                visited.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # Extra leading axes broadcast from nothing.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(out_data, parents: tuple, op: str) -> Tensor:
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(out_data, requires_grad=tracked,
                  _children=parents if tracked else (), _op=op)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.data.shape, b.data.shape) from None


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                a.accumulate_grad(ga, owned=ga is not g)
            if b.requires_grad:
                gb = _unbroadcast(g, b.data.shape)
                b.accumulate_grad(gb, owned=gb is not g)
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                a.accumulate_grad(ga, owned=ga is not g)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g, b.data.shape), owned=True)
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), owned=True)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), owned=True)
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = _make(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape), owned=True)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data),
                                               b.data.shape), owned=True)
        out._backward = _bw
    return out


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data * a.data, (a,), "square")
    if out.requires_grad:
        def _bw(g):
            a.accumulate_grad(2.0 * a.data * g, owned=True)
        out._backward = _bw
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log", f"input must be positive, min value {a.data.min()}")
    out = _make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _bw(g):
            a.accumulate_grad(g / a.data, owned=True)
        out._backward = _bw
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        y = out.data
        def _bw(g):
            a.accumulate_grad(g * y, owned=True)
        out._backward = _bw
    return out


def sign(a) -> Tensor:
    """Elementwise sign; its gradient is defined as zero everywhere."""
    a = _as_tensor(a)
    out = _make(np.sign(a.data), (a,), "sign")
    # Recorded in the graph when tracked, but contributes nothing backward.
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        mask = a.data > 0.0
        def _bw(g):
            a.accumulate_grad(g * mask, owned=True)
        out._backward = _bw
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through inside the interval."""
    a = _as_tensor(a)
    out = _make(np.clip(a.data, lo, hi), (a,), "clip")
    if out.requires_grad:
        mask = (a.data >= lo) & (a.data <= hi)
        def _bw(g):
            a.accumulate_grad(g * mask, owned=True)
        out._backward = _bw
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min of two tensors; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("minimum", a, b)
    out = _make(np.minimum(a.data, b.data), (a, b), "minimum")
    if out.requires_grad:
        take_a = a.data <= b.data
        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * take_a, a.data.shape), owned=True)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * ~take_a, b.data.shape), owned=True)
        out._backward = _bw
    return out


# -- reductions -----------------------------------------------------------

def _expand_reduced(g: np.ndarray, in_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if not keepdims and axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(in_shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            a.accumulate_grad(_expand_reduced(g, a.data.shape, axis, keepdims),
                              owned=True)
        out._backward = _bw
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        count = a.data.size // max(out.data.size, 1)
        def _bw(g):
            a.accumulate_grad(_expand_reduced(g, a.data.shape, axis, keepdims) / count, owned=True)
        out._backward = _bw
    return out


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient is split evenly among tied maxima."""
    a = _as_tensor(a)
    out = _make(a.data.max(axis=axis, keepdims=keepdims), (a,), "max")
    if out.requires_grad:
        expanded_max = _expand_reduced(out.data, a.data.shape, axis, keepdims)
        mask = (a.data == expanded_max).astype(np.float64)
        ties = mask.sum(axis=axis, keepdims=True)
        mask /= ties
        def _bw(g):
            a.accumulate_grad(_expand_reduced(g, a.data.shape, axis, keepdims) * mask, owned=True)
        out._backward = _bw
    return out


# -- shape ops ------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.data.shape, tuple(np.atleast_1d(shape))) from None
    out = _make(out_data, (a,), "reshape")
    if out.requires_grad:
        def _bw(g):
            a.accumulate_grad(g.reshape(a.data.shape), owned=True)
        out._backward = _bw
    return out


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = _make(a.data.transpose(axes), (a,), "transpose")
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def _bw(g):
            a.accumulate_grad(g.transpose(inverse), owned=True)
        out._backward = _bw
    return out


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    base = list(parts[0].data.shape)
    for p in parts[1:]:
        other = list(p.data.shape)
        if len(other) != len(base) or any(
                i != axis % len(base) and other[i] != base[i] for i in range(len(base))):
            raise ShapeMismatchError("concat", *(q.data.shape for q in parts))
    out = _make(np.concatenate([p.data for p in parts], axis=axis), parts, "concat")
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def _bw(g):
            for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(start, stop)
                    p.accumulate_grad(g[tuple(idx)], owned=True)
        out._backward = _bw
    return out


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Stacked matrix product; leading batch dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError("matmul", a.data.shape, b.data.shape,
                                 detail="operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError("matmul", a.data.shape, b.data.shape,
                                 detail="inner dimensions differ")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError("matmul", a.data.shape, b.data.shape) from None
    out = _make(out_data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -2, -1))
                a.accumulate_grad(_unbroadcast(ga, a.data.shape), owned=True)
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -2, -1), g)
                b.accumulate_grad(_unbroadcast(gb, b.data.shape), owned=True)
        out._backward = _bw
    return out


# -- nonlinearities over axes ------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (a,), "softmax")
    if out.requires_grad:
        def _bw(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - dot), owned=True)
        out._backward = _bw
    return out


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Guarded Euclidean norm sqrt(sum(x^2) + NORM_EPS) along ``axis``."""
    a = _as_tensor(a)
    if axis in (-1, a.data.ndim - 1):
        sq = np.einsum("...d,...d->...", a.data, a.data)
        if keepdims:
            sq = sq[..., None]
    else:
        sq = (a.data * a.data).sum(axis=axis, keepdims=keepdims)
    y = np.sqrt(sq + NORM_EPS)
    out = _make(y, (a,), "l2_norm")
    if out.requires_grad:
        y_arr = out.data
        def _bw(g):
            w = _expand_reduced(g / y_arr, a.data.shape, axis, keepdims)
            a.accumulate_grad(w * a.data, owned=True)
        out._backward = _bw
    return out


def weighted_sum(weights, vectors) -> Tensor:
    """s_j = sum_i w_ij * v_ij for stacked vectors, fused for speed.

    weights (B, I, J) with vectors (B, I, J, D) -> (B, J, D).
    Equivalent to ``sum_(mul(reshape(w, w.shape+(1,)), v), axis=1)``.
    """
    w, v = _as_tensor(weights), _as_tensor(vectors)
    if w.data.ndim != 3 or v.data.ndim != 4 or w.data.shape != v.data.shape[:3]:
        raise ShapeMismatchError("weighted_sum", w.data.shape, v.data.shape,
                                 detail="expected (B,I,J) weights and (B,I,J,D) vectors")
    out = _make(np.einsum("bij,bijd->bjd", w.data, v.data), (w, v), "weighted_sum")
    if out.requires_grad:
        def _bw(g):
            if w.requires_grad:
                w.accumulate_grad(np.einsum("bjd,bijd->bij", g, v.data), owned=True)
            if v.requires_grad:
                v.accumulate_grad(w.data[..., None] * g[:, None], owned=True)
        out._backward = _bw
    return out


def pair_distance(predictions, upper) -> Tensor:
    """Guarded Euclidean distance ||p_ij - u_j|| for every capsule pair, fused.

    predictions (B, I, J, D) with upper (B, J, D) -> (B, I, J).
    Equivalent to ``l2_norm(sub(p, reshape(u, (B,1,J,D))), axis=-1)`` up to
    float rounding; uses the expanded square to avoid the (B,I,J,D) temp.
    """
    p, u = _as_tensor(predictions), _as_tensor(upper)
    if p.data.ndim != 4 or u.data.ndim != 3 or \
            p.data.shape[0] != u.data.shape[0] or p.data.shape[2:] != u.data.shape[1:]:
        raise ShapeMismatchError("pair_distance", p.data.shape, u.data.shape,
                                 detail="expected (B,I,J,D) predictions and (B,J,D) upper")
    pp = np.einsum("bijd,bijd->bij", p.data, p.data)
    pu = np.einsum("bijd,bjd->bij", p.data, u.data)
    uu = np.einsum("bjd,bjd->bj", u.data, u.data)
    sq = np.maximum(pp - 2.0 * pu + uu[:, None], 0.0)
    out = _make(np.sqrt(sq + NORM_EPS), (p, u), "pair_distance")
    if out.requires_grad:
        d_arr = out.data
        def _bw(g):
            w = g / d_arr                                # (B, I, J)
            if p.requires_grad:
                gp = p.data - u.data[:, None]
                gp *= w[..., None]
                p.accumulate_grad(gp, owned=True)
            if u.requires_grad:
                gu = u.data * w.sum(axis=1)[..., None]
                gu -= np.einsum("bij,bijd->bjd", w, p.data)
                u.accumulate_grad(gu, owned=True)
        out._backward = _bw
    return out


def capsule_transform(v, w) -> Tensor:
    """Predictions u_hat_{j|i} = W_ij v_i for all capsule pairs, fused.

    v (B, I, D_in) with w (I, J, D_in, D_out) -> (B, I, J, D_out),
    grouped into one stacked matmul per lower capsule for speed.
    """
    v, w = _as_tensor(v), _as_tensor(w)
    if v.data.ndim != 3 or w.data.ndim != 4 or v.data.shape[1] != w.data.shape[0] \
            or v.data.shape[2] != w.data.shape[2]:
        raise ShapeMismatchError("capsule_transform", v.data.shape, w.data.shape,
                                 detail="expected (B,I,D_in) vectors and (I,J,D_in,D_out) matrices")
    batch, num_lower, d_in = v.data.shape
    _, num_upper, _, d_out = w.data.shape
    vt = np.ascontiguousarray(v.data.transpose(1, 0, 2))                  # (I, B, D_in)
    wt = np.ascontiguousarray(w.data.transpose(0, 2, 1, 3)).reshape(
        num_lower, d_in, num_upper * d_out)
    flat = np.matmul(vt, wt)                                              # (I, B, J*D_out)
    out_data = np.ascontiguousarray(flat.transpose(1, 0, 2)).reshape(
        batch, num_lower, num_upper, d_out)
    out = _make(out_data, (v, w), "capsule_transform")
    if out.requires_grad:
        def _bw(g):
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(
                num_lower, batch, num_upper * d_out)
            if v.requires_grad:
                gv = np.matmul(gt, wt.transpose(0, 2, 1))                 # (I, B, D_in)
                v.accumulate_grad(np.ascontiguousarray(gv.transpose(1, 0, 2)), owned=True)
            if w.requires_grad:
                gw = np.matmul(vt.transpose(0, 2, 1), gt)                 # (I, D_in, J*D_out)
                gw = gw.reshape(num_lower, d_in, num_upper, d_out).transpose(0, 2, 1, 3)
                w.accumulate_grad(np.ascontiguousarray(gw), owned=True)
        out._backward = _bw
    return out


def pair_dot(predictions, upper) -> Tensor:
    """Dot product <p_ij, u_j> for every capsule pair, fused.

    predictions (B, I, J, D) with upper (B, J, D) -> (B, I, J).
    """
    p, u = _as_tensor(predictions), _as_tensor(upper)
    if p.data.ndim != 4 or u.data.ndim != 3 or \
            p.data.shape[0] != u.data.shape[0] or p.data.shape[2:] != u.data.shape[1:]:
        raise ShapeMismatchError("pair_dot", p.data.shape, u.data.shape,
                                 detail="expected (B,I,J,D) predictions and (B,J,D) upper")
    out = _make(np.einsum("bijd,bjd->bij", p.data, u.data), (p, u), "pair_dot")
    if out.requires_grad:
        def _bw(g):
            if p.requires_grad:
                p.accumulate_grad(g[..., None] * u.data[:, None], owned=True)
            if u.requires_grad:
                u.accumulate_grad(np.einsum("bij,bijd->bjd", g, p.data), owned=True)
        out._backward = _bw
    return out


def squash(s, axis: int = -1) -> Tensor:
    """Vector nonlinearity: ||s||^2 / (1 + ||s||^2) * s / ||s||.

    Built from primitive ops so its gradient is exact by composition.
    Norm guarded by NORM_EPS: the zero vector maps to the zero vector,
    and the output norm is strictly below 1 for any finite input.
    """
    s = _as_tensor(s)
    sq = sum_(square(s), axis=axis, keepdims=True)
    nrm = l2_norm(s, axis=axis, keepdims=True)
    scale = div(sq, mul(add(sq, 1.0), nrm))
    return mul(s, scale)


# -- convolution --------------------------------------------------------------

def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int,
                  oh: int, ow: int) -> np.ndarray:
    """Strided view (B, C, KH, KW, OH, OW) over padded input; no copy."""
    sb, sc, sh, sw = xp.strides
    shape = (xp.shape[0], xp.shape[1], kh, kw, oh, ow)
    strides = (sb, sc, sh, sw, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x (B,C,H,W) with kernels w (OC,C,KH,KW)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatchError("conv2d", x.data.shape, w.data.shape,
                                 detail="expected (B,C,H,W) input and (OC,C,KH,KW) kernels")
    b_, c, h, wd = x.data.shape
    oc, wc, kh, kw = w.data.shape
    if wc != c:
        raise ShapeMismatchError("conv2d", x.data.shape, w.data.shape,
                                 detail="channel counts differ")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError("conv2d", x.data.shape, w.data.shape,
                                 detail=f"kernel does not fit (stride={stride}, pad={pad})")
    parents = (x, w) if bias is None else (x, w, _as_tensor(bias))
    bias_t = None if bias is None else parents[2]
    if bias_t is not None and bias_t.data.shape != (oc,):
        raise ShapeMismatchError("conv2d", bias_t.data.shape, (oc,),
                                 detail="bias must be (OC,)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    view = _conv_windows(xp, kh, kw, stride, oh, ow)
    out_data = np.tensordot(view, w.data, axes=([1, 2, 3], [1, 2, 3]))  # (B,OH,OW,OC)
    out_data = out_data.transpose(0, 3, 1, 2)
    if bias_t is not None:
        out_data = out_data + bias_t.data[None, :, None, None]
    out = _make(np.ascontiguousarray(out_data), parents, "conv2d")

    if out.requires_grad:
        def _bw(g):
            # g: (B, OC, OH, OW)
            if w.requires_grad:
                gw = np.tensordot(g, view, axes=([0, 2, 3], [0, 4, 5]))  # (OC,C,KH,KW)
                w.accumulate_grad(gw, owned=True)
            if bias_t is not None and bias_t.requires_grad:
                bias_t.accumulate_grad(g.sum(axis=(0, 2, 3)), owned=True)
            if x.requires_grad:
                # (B, OH, OW, C, KH, KW): per-window gradient contributions
                gcols = np.tensordot(g, w.data, axes=([1], [0]))
                gx = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if pad:
                    gx = gx[:, :, pad:-pad, pad:-pad]
                x.accumulate_grad(gx, owned=True)
        out._backward = _bw
    return out
