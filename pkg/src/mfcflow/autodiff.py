"""Vectorized reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tensor`` wraps an ndarray together with the tape entries needed to
backpropagate through it.  Only values derived from a ``Tensor`` are traced;
plain ndarrays and Python scalars act as constants, so evaluation code can be
written once and runs tape-free when no parameter tensor is involved.

Tapes are per-call: build the graph inside a loss closure, run
:func:`backward` (or use :func:`grad`), then drop the references.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class GradientError(RuntimeError):
    """Raised when a gradient computation produces a non-finite value."""


def val(x):
    """Underlying ndarray (or scalar) of ``x``, whether traced or not."""
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Array node in the reverse-mode tape."""

    __slots__ = ("data", "parents", "grad", "op")

    # keep numpy from coercing Tensors in mixed expressions; reflected
    # dunders below handle ndarray <op> Tensor instead
    __array_ufunc__ = None

    def __init__(self, data, parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        # parents: tuple of (Tensor, vjp) where vjp maps the output gradient
        # to this parent's gradient contribution (an ndarray).
        self.parents = parents
        self.grad = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return Tensor(-self.data, ((self, lambda g: -g),), "neg")

    def __pow__(self, c):
        if not isinstance(c, (int, float)):
            raise TypeError("only constant exponents are supported")
        out = self.data ** c
        xd = self.data
        return Tensor(out, ((self, lambda g: g * (c * xd ** (c - 1))),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        out = self.data[key]
        shape = self.data.shape

        def vjp(g):
            gz = np.zeros(shape)
            gz[key] = g
            return gz

        return Tensor(out, ((self, vjp),), "getitem")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.data.shape
        return Tensor(self.data.reshape(shape), ((self, lambda g: g.reshape(old)),), "reshape")

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def item(self):
        return float(self.data)


def _binary(a, b, out, vjp_a, vjp_b, op):
    parents = []
    if isinstance(a, Tensor):
        sa = a.data.shape
        parents.append((a, lambda g: _unbroadcast(vjp_a(g), sa)))
    if isinstance(b, Tensor):
        sb = b.data.shape
        parents.append((b, lambda g: _unbroadcast(vjp_b(g), sb)))
    return Tensor(out, tuple(parents), op)


def add(a, b):
    av, bv = val(a), val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av + bv
    return _binary(a, b, av + bv, lambda g: g, lambda g: g, "add")


def sub(a, b):
    av, bv = val(a), val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av - bv
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    av, bv = val(a), val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av * bv
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av, "mul")


def div(a, b):
    av, bv = val(a), val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av / bv
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv, "div")


def matmul(a, b):
    av, bv = val(a), val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av @ bv
    if np.ndim(av) != 2 or np.ndim(bv) != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _binary(a, b, av @ bv, lambda g: g @ bv.T, lambda g: av.T @ g, "matmul")


def affine(x, w, b):
    """Fused x @ w + b for an (N, k) input; one tape node instead of two."""
    xv, wv, bv = val(x), val(w), val(b)
    out = xv @ wv
    out += bv
    if not (isinstance(x, Tensor) or isinstance(w, Tensor) or isinstance(b, Tensor)):
        return out
    parents = []
    if isinstance(x, Tensor):
        parents.append((x, lambda g: g @ wv.T))
    if isinstance(w, Tensor):
        parents.append((w, lambda g: xv.T @ g))
    if isinstance(b, Tensor):
        parents.append((b, lambda g: g.sum(axis=0)))
    return Tensor(out, tuple(parents), "affine")


# -- elementwise ------------------------------------------------------------


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out = np.exp(x.data)
    return Tensor(out, ((x, lambda g: g * out),), "exp")


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    xd = x.data
    return Tensor(np.log(xd), ((x, lambda g: g / xd),), "log")


def sqrt(x):
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    out = np.sqrt(x.data)
    return Tensor(out, ((x, lambda g: g * (0.5 / out)),), "sqrt")


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    out = np.tanh(x.data)
    return Tensor(out, ((x, lambda g: g * (1.0 - out * out)),), "tanh")


def softplus(x):
    """log(1 + e^x), evaluated stably for large |x|."""
    if not isinstance(x, Tensor):
        return np.logaddexp(0.0, x)
    xd = x.data
    return Tensor(np.logaddexp(0.0, xd), ((x, lambda g: g * expit(xd)),), "softplus")


def maximum(a, b):
    av, bv = val(a), val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.maximum(av, bv)
    mask = av >= bv  # ties route to the first argument
    return _binary(a, b, np.maximum(av, bv),
                   lambda g: g * mask, lambda g: g * ~mask, "maximum")


def minimum(a, b):
    av, bv = val(a), val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.minimum(av, bv)
    mask = av <= bv
    return _binary(a, b, np.minimum(av, bv),
                   lambda g: g * mask, lambda g: g * ~mask, "minimum")


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is never traced."""
    cond = np.asarray(val(cond), dtype=bool)
    av, bv = val(a), val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.where(cond, av, bv)
    return _binary(a, b, np.where(cond, av, bv),
                   lambda g: g * cond, lambda g: g * ~cond, "where")


# -- reductions / structure -------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.data.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return Tensor(out, ((x, vjp),), "sum")


def tmean(x, axis=None, keepdims=False):
    xv = val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) / n


def cumsum(x, axis):
    if not isinstance(x, Tensor):
        return np.cumsum(x, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return Tensor(np.cumsum(x.data, axis=axis), ((x, vjp),), "cumsum")


def concatenate(parts, axis=0):
    datas = [val(p) for p in parts]
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(datas, axis=axis)
    out = np.concatenate(datas, axis=axis)
    offsets = np.cumsum([0] + [d.shape[axis] for d in datas])
    parents = []
    for i, p in enumerate(parts):
        if not isinstance(p, Tensor):
            continue
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        parents.append((p, lambda g, sl=sl: g[sl]))
    return Tensor(out, tuple(parents), "concatenate")


def column_stack(cols):
    """Stack 1-D columns into an (N, k) matrix."""
    parts = []
    for c in cols:
        if isinstance(c, Tensor):
            parts.append(c.reshape((len(c.data), 1)) if c.ndim == 1 else c)
        else:
            c = np.asarray(c, dtype=np.float64)
            parts.append(c.reshape(-1, 1) if c.ndim == 1 else c)
    return concatenate(parts, axis=1)


def gather_rows(x, idx):
    """Per-row gather: out[n] = x[n, idx[n]] for a 2-D ``x``."""
    idx = np.asarray(idx)
    rows = np.arange(idx.shape[0])
    if not isinstance(x, Tensor):
        return x[rows, idx]
    shape = x.data.shape

    def vjp(g):
        gz = np.zeros(shape)
        gz[rows, idx] = g  # one target cell per row: plain assignment is exact
        return gz

    return Tensor(x.data[rows, idx], ((x, vjp),), "gather_rows")


def softmax(x, axis=-1):
    """Softmax along ``axis``; the max-shift is detached (it cancels exactly)."""
    shift = np.max(val(x), axis=axis, keepdims=True)
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


# -- backward pass ----------------------------------------------------------


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate gradients of ``root`` (summed if non-scalar) into ``.grad``."""
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                # never in place: vjps may return views of shared buffers
                parent.grad = parent.grad + contrib


def _first_bad_node(root):
    for node in _toposort(root):
        if not np.all(np.isfinite(node.data)):
            return node, "value"
        if node.grad is not None and not np.all(np.isfinite(node.grad)):
            return node, "gradient"
    return None, None


def grad(loss_fn, params):
    """Value and gradient of a scalar loss with respect to a flat parameter vector.

    ``loss_fn`` receives the parameters as a leaf ``Tensor`` and must return a
    scalar built from the primitives in this module.  The returned value is the
    plain evaluation of the loss; the gradient is aligned index-for-index with
    ``params``.
    """
    leaf = Tensor(np.array(params, dtype=np.float64, copy=True))
    out = loss_fn(leaf)
    if not isinstance(out, Tensor):
        raise GradientError("loss does not depend on the parameters through traced ops")
    if out.data.size != 1:
        raise GradientError(f"loss must be scalar, got shape {out.data.shape}")
    value = float(out.data)
    backward(out)
    g = leaf.grad
    if g is None:
        g = np.zeros_like(leaf.data)
    g = np.asarray(g, dtype=np.float64).reshape(leaf.data.shape)
    if not (np.isfinite(value) and np.all(np.isfinite(g))):
        node, kind = _first_bad_node(out)
        where_ = f" (first non-finite {kind} at primitive {node.op!r})" if node else ""
        raise GradientError(f"non-finite result in gradient computation{where_}")
    return value, g
