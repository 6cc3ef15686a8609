"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is built eagerly: every op allocates a :class:`Tensor` that
remembers its parent tensors and a vector-Jacobian closure. ``backward``
replays the closures in reverse creation order, which is a valid
topological order because an op can only consume tensors that already
exist. Replaying the same graph twice therefore accumulates gradients in
exactly the same order, so repeated backward passes are bitwise
reproducible.

Training runs at float32; gradient checking builds the same graphs at
float64 (see :func:`finite_difference_check`). Every forward op verifies
its output is finite and raises :class:`NonFiniteValue` otherwise.

Broadcasting follows numpy's trailing-aligned semantics; the backward
rule is uniform (sum the gradient over every expanded axis), which keeps
the op set auditable without a bespoke shape subset.
"""

from __future__ import annotations

import ctypes
import itertools
from contextlib import contextmanager

import numpy as np

try:
    # graph retention makes every iteration allocate fresh multi-hundred-KB
    # arrays; above glibc's default mmap threshold each one becomes an
    # mmap/munmap pair and page-fault churn dominates. Keep them on the heap.
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 96 * 1024 * 1024)   # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 128 * 1024 * 1024)  # M_TRIM_THRESHOLD
except (OSError, AttributeError):  # non-glibc platforms
    pass


class DiffError(Exception):
    """Base class for autodiff failures."""


class ShapeMismatch(DiffError):
    """Operand shapes are not compatible for the requested op."""


class NonFiniteValue(DiffError):
    """A forward op produced NaN or Inf."""


class NotScalarLoss(DiffError):
    """backward() was started from a non-scalar tensor."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording; ops compute forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus its position in the computation graph.

    ``value`` is the forward result, ``grad`` is filled by ``backward``.
    Leaves are created directly; interior nodes are created by ops and
    carry a vjp closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "tid", "_vjp")

    def __init__(self, value, requires_grad=False, dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value = arr
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self.requires_grad = bool(requires_grad)
        self._vjp = None
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def data(self):
        """Flat row-major view of the stored values."""
        return self.value.reshape(-1)

    def detach(self):
        """Same values, severed from the graph."""
        return Tensor(self.value)

    def item(self):
        return float(self.value)

    # arithmetic sugar; the module-level functions do the real work
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def as_tensor(x, like=None, dtype=None):
    """Coerce to a constant Tensor, matching ``like``'s dtype when given."""
    if isinstance(x, Tensor):
        return x
    if dtype is None and like is not None:
        dtype = like.dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _node(op, value, parents, vjp):
    value = np.asarray(value)
    # single-pass guard: NaN/Inf propagate through the sum (legitimate
    # magnitudes in this system are far from float32 overflow)
    if not np.isfinite(value.sum()):
        raise NonFiniteValue(f"op '{op}' produced non-finite values")
    if not (_grad_enabled and any(p.requires_grad for p in parents)):
        return Tensor(value)
    out = Tensor(value)
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = True
    out._vjp = vjp
    return out


def custom(op, value, parents, vjp):
    """Record a composite op with a hand-written vjp.

    ``vjp(grad_out)`` must return one gradient (or None) per parent.
    Used for fused kernels whose unfused form would flood the tape.
    """
    return _node(op, value, parents, vjp)


def _out_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.value.shape} and {b.value.shape}") from None


def _unbroadcast(g, shape):
    """Sum gradient over axes that were expanded by broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    return a, b


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a, b):
    a, b = _pair(a, b)
    _out_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _node("add", a.value + b.value, (a, b), vjp)


def sub(a, b):
    a, b = _pair(a, b)
    _out_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _node("sub", a.value - b.value, (a, b), vjp)


def mul(a, b):
    a, b = _pair(a, b)
    _out_shape(a, b, "mul")

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return _node("mul", a.value * b.value, (a, b), vjp)


def div(a, b):
    a, b = _pair(a, b)
    _out_shape(a, b, "div")

    def vjp(g):
        return (_unbroadcast(g / b.value, a.value.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _node("div", a.value / b.value, (a, b), vjp)


def neg(a):
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    return _node("neg", -a.value, (a,), vjp)


def matmul(a, b):
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.value.shape} and {b.value.shape}")

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _node("matmul", a.value @ b.value, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return _node("exp", out, (a,), vjp)


def relu(a):
    a = as_tensor(a)

    def vjp(g):
        return (g * (a.value > 0),)

    return _node("relu", np.maximum(a.value, 0), (a,), vjp)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node("tanh", out, (a,), vjp)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.value))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node("sigmoid", out, (a,), vjp)


def sin(a):
    a = as_tensor(a)

    def vjp(g):
        return (g * np.cos(a.value),)

    return _node("sin", np.sin(a.value), (a,), vjp)


def cos(a):
    a = as_tensor(a)

    def vjp(g):
        return (-g * np.sin(a.value),)

    return _node("cos", np.cos(a.value), (a,), vjp)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)

    def vjp(g):
        return (g / (2.0 * out),)

    return _node("sqrt", out, (a,), vjp)


def absolute(a):
    a = as_tensor(a)

    def vjp(g):
        # subgradient 0 at x == 0
        return (g * np.sign(a.value),)

    return _node("abs", np.abs(a.value), (a,), vjp)


def clip(a, lo=None, hi=None):
    """Clamp values; gradient passes through wherever the input is unclipped
    (boundary values included)."""
    a = as_tensor(a)
    out = np.clip(a.value, lo, hi)
    mask = np.ones_like(a.value, dtype=bool)
    if lo is not None:
        mask &= a.value >= lo
    if hi is not None:
        mask &= a.value <= hi

    def vjp(g):
        return (g * mask,)

    return _node("clip", out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape / indexing ops

def reshape(a, shape):
    a = as_tensor(a)
    old = a.value.shape
    out = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _node("reshape", out, (a,), vjp)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _node("transpose", a.value.transpose(axes), (a,), vjp)


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeMismatch(f"broadcast_to: {a.value.shape} -> {shape}") from None

    def vjp(g):
        return (_unbroadcast(g, a.value.shape),)

    return _node("broadcast", out.copy(), (a,), vjp)


def tslice(a, key):
    """Basic indexing (ints/slices); gradient scatters back into zeros.

    The forward result may be a view; tensor values are never mutated in
    place except leaves between graph builds, so views stay valid.
    """
    a = as_tensor(a)
    out = a.value[key]

    def vjp(g):
        z = np.zeros_like(a.value)
        z[key] += g
        return (z,)

    return _node("slice", out, (a,), vjp)


def scatter_add_rows(shape, dtype, idx, g):
    """Deterministic row scatter-add (bincount accumulates in input order)."""
    rest = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    if rest > 1:
        flat_idx = (idx[:, None] * rest + np.arange(rest)[None, :]).ravel()
    else:
        flat_idx = idx
    out = np.bincount(flat_idx, weights=g.ravel(), minlength=shape[0] * rest)
    return out.reshape(shape).astype(dtype, copy=False)


def gather_rows(a, idx, unique=False):
    """Select rows along axis 0 by an integer index array.

    ``unique=True`` promises no repeated indices, enabling a direct
    assignment in the backward pass.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.value[idx]

    def vjp(g):
        if unique:
            z = np.zeros_like(a.value)
            z[idx] = g
            return (z,)
        return (scatter_add_rows(a.value.shape, a.value.dtype, idx, g),)

    return _node("gather", out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].value.shape
    for t in tensors[1:]:
        tshape = t.value.shape
        if len(tshape) != len(ref) or any(
            i != axis and tshape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeMismatch(f"concat axis {axis}: {[t.value.shape for t in tensors]}")
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for k in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _node("concat", np.concatenate([t.value for t in tensors], axis=axis),
                 tuple(tensors), vjp)


def stack0(tensors):
    """Stack equal-shape tensors along a new leading axis."""
    return concat([reshape(t, (1,) + t.value.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape),)

    return _node("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_pool(a, axis):
    """Max over one axis. Ties route the gradient to the first index."""
    a = as_tensor(a)
    out = a.value.max(axis=axis)
    idx = a.value.argmax(axis=axis)

    def vjp(g):
        z = np.zeros_like(a.value)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (z,)

    return _node("max_pool", out, (a,), vjp)


def seq_sum0(a):
    """Sum over axis 0 with strictly sequential accumulation order.

    Matches a front-to-back compositing loop term for term, unlike
    numpy's pairwise reduction.
    """
    a = as_tensor(a)
    out = np.zeros(a.value.shape[1:], dtype=a.value.dtype)
    for i in range(a.value.shape[0]):
        out += a.value[i]

    def vjp(g):
        return (np.broadcast_to(g, a.value.shape),)

    return _node("seq_sum0", out, (a,), vjp)


def exclusive_cumprod0(a):
    """T[i] = prod(a[:i]) along axis 0, with T[0] = 1.

    Factors must be nonzero (guaranteed by the alpha clamp when used for
    transmittance). np.cumprod multiplies strictly left to right, so the
    result equals a sequential per-step product bit for bit.
    """
    a = as_tensor(a)
    v = a.value
    out = np.empty_like(v)
    out[0] = 1.0
    if v.shape[0] > 1:
        np.cumprod(v[:-1], axis=0, out=out[1:])

    def vjp(g):
        gt = g * out
        suffix = np.flip(np.cumsum(np.flip(gt, 0), axis=0), 0) - gt
        return (suffix / v,)

    return _node("excl_cumprod", out, (a,), vjp)


def normalize_l2(a, eps=0.0):
    """Normalize rows (last axis) to unit Euclidean length."""
    a = as_tensor(a)
    n = np.sqrt((a.value * a.value).sum(axis=-1, keepdims=True)) + eps
    out = a.value / n

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / n,)

    return _node("normalize_l2", out, (a,), vjp)


# ---------------------------------------------------------------------------
# backward

def backward(loss, params=None):
    """Populate ``grad`` for every tensor reachable from ``loss``.

    ``params``: optional leaves whose gradient should be materialized even
    when they do not appear in the graph (they get exact zeros).
    """
    if not isinstance(loss, Tensor):
        raise NotScalarLoss("loss must be a Tensor")
    if loss.value.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.value.shape}")

    # collect the reachable subgraph
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.tid in seen or not t.requires_grad:
            continue
        seen.add(t.tid)
        nodes.append(t)
        stack.extend(t.parents)

    nodes.sort(key=lambda t: t.tid, reverse=True)
    for t in nodes:
        t.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.value)

    for t in nodes:
        if t.grad is None or t._vjp is None:
            continue
        grads = t._vjp(t.grad)
        for p, g in zip(t.parents, grads):
            if g is None or not p.requires_grad:
                continue
            # reallocate instead of += : vjps may alias the child's grad
            p.grad = g if p.grad is None else p.grad + g

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)


def zero_grads(params):
    for p in params:
        p.grad = None


def finite_difference_check(f, params, eps=1e-5, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params`` (leaf tensors, perturbed in place). The error for each
    coordinate is |analytic - numeric| / (|analytic| + |numeric| + eps);
    the max over all checked coordinates is returned. ``max_coords`` caps
    the number of coordinates probed per parameter (seeded subsample).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = f()
    backward(loss, params=params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.value.reshape(-1)
            gflat = ga.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                r = rng if rng is not None else np.random.default_rng(0)
                coords = r.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().value)
                flat[i] = orig - eps
                fm = float(f().value)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                a = float(gflat[i])
                err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
                worst = max(worst, err)
    return worst
