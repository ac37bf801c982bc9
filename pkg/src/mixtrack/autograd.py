"""Reverse-mode automatic differentiation over numpy buffers.

The graph is built eagerly by the ops below; ``backward(loss)`` walks it in
reverse topological order and accumulates gradients into every reachable
tensor with ``requires_grad``. Model state is float32; float64 inputs are
accepted everywhere and propagate (the gradient checker relies on this for
its 64-bit shadow evaluation).

Every op validates that its output is finite; NaN/Inf anywhere is an error
state, raised as :class:`NumericError`.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

from .errors import GraphError, NumericError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (teacher inference, tracking, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense tensor with optional gradient tracking.

    ``data`` is a numpy float buffer (row-major for anything that gets
    serialized), ``grad`` is lazily allocated by ``backward`` and has the
    same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Constant view of this tensor, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=DEFAULT_DTYPE):
    """Create a leaf tensor, validating finiteness."""
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise NumericError("leaf tensor contains non-finite values")
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    """Central node constructor: finite check + graph bookkeeping."""
    if not np.all(np.isfinite(data)):
        raise NumericError("op produced non-finite values")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    `loss` must be scalar. The graph is freed as it is walked; a second
    backward through the same graph raises GraphError.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._parents and node._backward is None:
            raise GraphError("graph already freed; build a fresh forward pass before backward")
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None


# -- arithmetic -------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    """Elementwise (broadcast) product; also covers scaling by a scalar."""
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor):
    """Batched matrix product with numpy broadcasting over leading axes."""
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out_data, (a, b), bwd)


# -- structure --------------------------------------------------------------

def reshape(x: Tensor, shape):
    out_data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.shape))

    return _make(out_data, (x,), bwd)


def transpose(x: Tensor, axes):
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _make(out_data, (x,), bwd)


def take(x: Tensor, key):
    """Basic (slice/index) subscript; the backward scatters into place."""
    out_data = x.data[key]

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[key] = g
        _accum(x, buf)

    return _make(out_data, (x,), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int):
    key = [slice(None)] * x.ndim
    key[axis] = slice(start, stop)
    return take(x, tuple(key))


def concat(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(lo, hi)
            _accum(t, g[tuple(key)])

    return _make(out_data, tuple(tensors), bwd)


def split(x: Tensor, sections: int, axis=0):
    """Split into `sections` equal parts along `axis`."""
    n = x.shape[axis]
    if n % sections != 0:
        raise ValueError(f"cannot split axis of extent {n} into {sections} equal parts")
    step = n // sections
    return [slice_axis(x, axis, i * step, (i + 1) * step) for i in range(sections)]


def embedding(table: Tensor, indices):
    """Row lookup into a parameter table ([V, d] gathered by int indices)."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("embedding indices must be integers")
    out_data = table.data[idx]

    def bwd(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(out_data, (table,), bwd)


# -- reductions -------------------------------------------------------------

def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(in_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def sum_(x: Tensor, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        _accum(x, _expand_reduced(g, x.shape, axis, keepdims).astype(x.data.dtype, copy=False))

    return _make(out_data, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims=False):
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.size // max(1, out_data.size)

    def bwd(g):
        _accum(x, (_expand_reduced(g, x.shape, axis, keepdims) / count).astype(x.data.dtype, copy=False))

    return _make(out_data, (x,), bwd)


# -- elementwise nonlinearities ----------------------------------------------

def exp(x: Tensor):
    out_data = np.exp(x.data)

    def bwd(g):
        _accum(x, g * out_data)

    return _make(out_data, (x,), bwd)


def log(x: Tensor):
    if np.any(x.data <= 0):
        raise NumericError("log requires strictly positive input")
    out_data = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)

    return _make(out_data, (x,), bwd)


def sqrt(x: Tensor):
    if np.any(x.data < 0):
        raise NumericError("sqrt requires nonnegative input")
    out_data = np.sqrt(x.data)

    def bwd(g):
        _accum(x, g * (0.5 / np.maximum(out_data, np.finfo(out_data.dtype).tiny)))

    return _make(out_data, (x,), bwd)


def arctan(x: Tensor):
    out_data = np.arctan(x.data)

    def bwd(g):
        _accum(x, g / (1.0 + x.data * x.data))

    return _make(out_data, (x,), bwd)


def abs_(x: Tensor):
    out_data = np.abs(x.data)

    def bwd(g):
        _accum(x, g * np.sign(x.data))

    return _make(out_data, (x,), bwd)


def maximum(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    mask = a.data >= b.data  # ties route to the first argument
    out_data = np.where(mask, a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * mask, a.shape))
        _accum(b, _unbroadcast(g * ~mask, b.shape))

    return _make(out_data, (a, b), bwd)


def minimum(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    mask = a.data <= b.data
    out_data = np.where(mask, a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * mask, a.shape))
        _accum(b, _unbroadcast(g * ~mask, b.shape))

    return _make(out_data, (a, b), bwd)


def clamp(x: Tensor, lo=None, hi=None):
    out = x
    if lo is not None:
        out = maximum(out, lo)
    if hi is not None:
        out = minimum(out, hi)
    return out


def sigmoid(x: Tensor):
    # split by sign for stability on large |x|
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out_data = out_data.astype(d.dtype, copy=False)

    def bwd(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bwd)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor):
    """Exact (erf) GELU: x * Phi(x)."""
    d = x.data
    phi = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out_data = (d * phi).astype(d.dtype, copy=False)

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
        _accum(x, g * (phi + d * pdf).astype(d.dtype, copy=False))

    return _make(out_data, (x,), bwd)


def softmax(x: Tensor, axis=-1):
    """Max-subtracted softmax along `axis`; rows sum to 1 within 1e-6.

    The denominator accumulates in sorted order, so the output is exactly
    permutation-equivariant (float sums are order-dependent otherwise).
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, (g - dot) * out_data)

    return _make(out_data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-6):
    """Per-token (last axis) layer normalization with learnable gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, ((dxhat - m1 - xhat * m2) * inv).astype(x.data.dtype, copy=False))

    return _make(out_data, (x, gain, bias), bwd)


# -- losses -------------------------------------------------------------------

KL_EPS = 1e-12


def _check_normalized(arr, name):
    if np.any(arr < 0):
        raise NumericError(f"{name} has negative entries; expected a distribution")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise NumericError(f"{name} not normalized along last axis (max |sum-1| = {np.abs(sums - 1.0).max():.3g})")


def kl_divergence(p: Tensor, q: Tensor):
    """Sum of p * ln(p/q) over all entries, with 0*ln(0/q) = 0.

    Both arguments must be normalized along the last axis (within 1e-5);
    q is floored at 1e-12 before the log so teacher maps with exact zeros
    are legal targets. kl(p, p) is exactly 0.
    """
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    _check_normalized(p.data, "p")
    _check_normalized(q.data, "q")

    support = p.data > 0
    p_safe = np.where(support, p.data, 1.0)
    q_floor = np.maximum(q.data, KL_EPS)
    terms = np.where(support, p.data * (np.log(p_safe) - np.log(q_floor)), 0.0)
    out_data = np.asarray(terms.sum(), dtype=p.dtype)

    def bwd(g):
        if p.requires_grad:
            _accum(p, (g * np.where(support, np.log(p_safe) - np.log(q_floor) + 1.0, 0.0)).astype(p.data.dtype, copy=False))
        if q.requires_grad:
            _accum(q, (g * np.where(q.data > KL_EPS, -p.data / q_floor, 0.0)).astype(q.data.dtype, copy=False))

    return _make(out_data, (p, q), bwd)


BCE_EPS = 1e-7


def binary_cross_entropy(p: Tensor, target):
    """Mean BCE between probabilities p in (0,1) and 0/1 targets."""
    target = _as_tensor(target, p.dtype)
    clipped = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(target.data * np.log(clipped) + (1.0 - target.data) * np.log(1.0 - clipped))
    out_data = np.asarray(losses.mean(), dtype=p.dtype)
    inside = (p.data > BCE_EPS) & (p.data < 1.0 - BCE_EPS)

    def bwd(g):
        grad = np.where(inside, (clipped - target.data) / (clipped * (1.0 - clipped)), 0.0)
        _accum(p, (g * grad / p.data.size).astype(p.data.dtype, copy=False))

    return _make(out_data, (p, target), bwd)


def l1_loss(a: Tensor, b):
    """Mean absolute error."""
    b = _as_tensor(b, a.dtype)
    diff = a.data - b.data
    out_data = np.asarray(np.abs(diff).mean(), dtype=a.dtype)

    def bwd(g):
        s = g * np.sign(diff) / diff.size
        _accum(a, s.astype(a.data.dtype, copy=False))
        _accum(b, (-s).astype(b.data.dtype, copy=False))

    return _make(out_data, (a, b), bwd)


def mse_loss(a: Tensor, b):
    """Mean squared error."""
    b = _as_tensor(b, a.dtype)
    diff = a.data - b.data
    out_data = np.asarray((diff * diff).mean(), dtype=a.dtype)

    def bwd(g):
        s = g * 2.0 * diff / diff.size
        _accum(a, s.astype(a.data.dtype, copy=False))
        _accum(b, (-s).astype(b.data.dtype, copy=False))

    return _make(out_data, (a, b), bwd)
