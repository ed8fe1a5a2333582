"""Minimal deterministic tensor engine with reverse-mode differentiation.

Values are numpy arrays wrapped in :class:`Tensor` nodes. Every operation
records its parents and a backward closure; calling :func:`backward` on a
scalar result walks the recorded graph once in reverse topological order
and accumulates gradients into every tensor that has ``requires_grad`` set.

Only the handful of operations the transcoder needs are provided. All
reductions use a single fixed accumulation order, so results are
bit-reproducible given identical inputs.
"""

from __future__ import annotations

import numpy as np


class TensorError(ValueError):
    """Raised on shape, kind, or finiteness violations."""


def _check_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise TensorError(f"non-finite values in {what}")


class Tensor:
    """Dense n-dimensional real array with optional gradient tracking.

    ``data`` is always a float32 or float64 numpy array. ``grad`` is
    allocated lazily during the backward pass and always matches the
    shape and dtype of ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, check=True):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if check:
            _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def detach(self):
        """A view of the same data with no history and no gradient."""
        return Tensor(self.data, requires_grad=False, check=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar (thin wrappers over the module-level ops) -------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data, parents, backward):
    """Build a result tensor, recording history only when a parent needs it."""
    out = Tensor(data, check=False)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _node(out_data, (a, b), backward)


def leaky_relu(x, alpha=0.1):
    """Elementwise leaky rectifier: x for x >= 0, alpha * x below.

    Monotone for alpha >= 0 and invertible for alpha > 0, so signed
    signals survive a stack of these without losing information.
    """
    x = as_tensor(x)
    _check_finite(x.data, "activation input")
    neg = x.data < 0
    out_data = np.where(neg, alpha * x.data, x.data)

    def backward(g):
        return (np.where(neg, alpha * g, g),)

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def mse(a, b):
    """Sum of squared differences over all elements (sum convention).

    The per-element mean is ``mse(a, b).item() / a.size``; callers that log
    both should divide rather than recompute.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise TensorError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out_data = np.array(np.dot(diff.ravel(), diff.ravel()), dtype=a.dtype)

    def backward(g):
        scaled = (2.0 * g) * diff
        return scaled, -scaled

    return _node(out_data, (a, b), backward)


def tensor_sum(x):
    x = as_tensor(x)
    out_data = np.array(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out_data, (x,), backward)


def axis_block_mean(x, axis, factor):
    """Mean over consecutive non-overlapping blocks of ``factor`` along ``axis``.

    The axis extent must be divisible by ``factor``; trimming policy lives
    with the callers, which know whether their axis is space or time.
    """
    x = as_tensor(x)
    factor = int(factor)
    if factor < 1:
        raise TensorError("block factor must be >= 1")
    n = x.shape[axis]
    if n % factor != 0:
        raise TensorError(f"extent {n} not divisible by block factor {factor}")
    if factor == 1:
        def backward_id(g):
            return (g,)
        return _node(x.data.copy(), (x,), backward_id)

    shape = list(x.shape)
    shape[axis] = n // factor
    shape.insert(axis + 1, factor)
    out_data = x.data.reshape(shape).mean(axis=axis + 1)

    def backward(g):
        gx = np.repeat(g, factor, axis=axis) / factor
        return (gx.astype(x.dtype, copy=False),)

    return _node(out_data, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(out_data, (x,), backward)


def slice_axis(x, axis, start, stop):
    """Contiguous slice [start:stop) along one axis."""
    x = as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out_data = x.data[sl].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _node(out_data, (x,), backward)


def take_flat_spatial(x, flat_indices, n_spatial=3):
    """Gather rows of ``x`` with its leading spatial axes flattened.

    Maps [X, Y, Z, ...] to [K, ...] where K = len(flat_indices); the indices
    address row-major positions in the flattened X*Y*Z axis. Gradient
    scatters back (duplicated indices accumulate).
    """
    x = as_tensor(x)
    idx = np.asarray(flat_indices, dtype=np.intp)
    vox = int(np.prod(x.shape[:n_spatial]))
    rest = x.shape[n_spatial:]
    flat = x.data.reshape((vox,) + rest)
    out_data = flat[idx]

    def backward(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, idx, g)
        return (gx.reshape(x.shape),)

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss, params=None):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar (size-1) tensor produced by a recorded forward
    computation. Gradients accumulate, so callers reusing parameters across
    steps must clear them first. When ``params`` is given, any listed tensor
    the computation never touched receives an explicit zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise TensorError("backward expects a Tensor")
    if loss.size != 1:
        raise TensorError(f"backward expects a scalar, got shape {loss.shape}")

    # Depth-first topological order, iterative to survive long temporal chains.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.requires_grad or parent._backward is not None:
                parent._accumulate(g.astype(parent.dtype, copy=False))
        node.grad = None  # interior node, free eagerly

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
