"""Small reverse-mode automatic differentiation over numpy arrays.

Every backward rule is written in terms of :class:`Tensor` operations, so the
gradient graph is itself differentiable.  That is what makes Hessian-vector
products (and the Hutchinson estimator built on them) exact.

Only the primitives the models in this package need are supported: 2-D
matmul, elementwise arithmetic with row/scalar broadcasting, a handful of
activations, reductions, slicing and concatenation.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=()):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        # tuple of (parent tensor, vjp callable: upstream Tensor -> Tensor)
        self._parents = _parents

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        if not other.requires_grad:
            return mul(self, Tensor(1.0 / other.data))
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents):
    """Create an op output, recording only parents that need gradients."""
    if not _GRAD_ENABLED:
        return Tensor(data)
    kept = [pf for pf in parents if pf[0].requires_grad]
    if not kept:
        return Tensor(data)
    return Tensor(data, True, tuple(kept))


# ---------------------------------------------------------------- broadcasting


def sum_to(x: Tensor, shape) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = x.data
    lead = data.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and data.shape[i + lead] != 1
    )
    out = data.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    out = out.reshape(shape)
    return _make(out, [(x, lambda g: broadcast_to(g, x.shape))])


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make(np.broadcast_to(x.data, shape), [(x, lambda g: sum_to(g, x.shape))])


# ---------------------------------------------------------------- arithmetic


def _identity(g):
    return g


def _reduce_to(x: Tensor, shape):
    # upstream gradients already have the output shape; only reduce when x was broadcast
    return _identity if x.shape == shape else (lambda g: sum_to(g, x.shape))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, [(a, _reduce_to(a, out.shape)), (b, _reduce_to(b, out.shape))])


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [(a, lambda g: neg(g))])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    shape = out.shape
    if a.shape == shape:
        va = lambda g: mul(g, b)  # noqa: E731
    else:
        va = lambda g: sum_to(mul(g, b), a.shape)  # noqa: E731
    if b.shape == shape:
        vb = lambda g: mul(g, a)  # noqa: E731
    else:
        vb = lambda g: sum_to(mul(g, a), b.shape)  # noqa: E731
    return _make(out, [(a, va), (b, vb)])


def reciprocal(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return neg(mul(g, mul(out, out)))

    out = _make(1.0 / a.data, [(a, vjp)])
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        [(a, lambda g: matmul(g, transpose(b))), (b, lambda g: matmul(transpose(a), g))],
    )


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, [(a, lambda g: transpose(g))])


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), [(a, lambda g: reshape(g, a.shape))])


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(out, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return broadcast_to(g, a.shape)

    return _make(out, [(a, vjp)])


# ---------------------------------------------------------------- elementwise


def exp(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return mul(g, out)

    out = _make(np.exp(a.data), [(a, vjp)])
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), [(a, lambda g: mul(g, reciprocal(a)))])


def sigmoid(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return mul(g, mul(out, 1.0 - out))

    out = _make(0.5 * (1.0 + np.tanh(0.5 * a.data)), [(a, vjp)])
    return out


def tanh(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return mul(g, 1.0 - mul(out, out))

    out = _make(np.tanh(a.data), [(a, vjp)])
    return out


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(0.0, a.data)
    return _make(data, [(a, lambda g: mul(g, sigmoid(a)))])


def tanhshrink(a: Tensor) -> Tensor:
    """``x - tanh(x)``; derivative ``tanh(x)^2``."""
    t = np.tanh(a.data)
    return _make(a.data - t, [(a, lambda g: mul(g, square(tanh(a))))])


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def sqrt(a: Tensor) -> Tensor:
    """Square root with a zero (rather than infinite) gradient at 0."""
    data = np.sqrt(np.maximum(a.data, 0.0))
    out = None

    def vjp(g):
        safe = Tensor(np.where(out.data > 0, 1.0, 0.0))
        denom = out + Tensor(np.where(out.data > 0, 0.0, 1.0))
        return mul(mul(g, safe), mul(reciprocal(denom), 0.5))

    out = _make(data, [(a, vjp)])
    return out


def clamp(a: Tensor, lo=None, hi=None, straight_through=True) -> Tensor:
    """Clamp values.  With ``straight_through`` the gradient passes unchanged."""
    data = np.clip(a.data, lo, hi)
    if straight_through:
        return _make(data, [(a, lambda g: g)])
    inside = np.ones_like(a.data)
    if lo is not None:
        inside[a.data < lo] = 0.0
    if hi is not None:
        inside[a.data > hi] = 0.0
    mask = Tensor(inside)
    return _make(data, [(a, lambda g: mul(g, mask))])


# ---------------------------------------------------------------- indexing


def getitem(a: Tensor, index) -> Tensor:
    return _make(a.data[index], [(a, lambda g: _scatter(g, index, a.shape))])


def _scatter(g: Tensor, index, shape) -> Tensor:
    out = np.zeros(shape)
    np.add.at(out, index, g.data)
    return _make(out, [(g, lambda h: getitem(h, index))])


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    parents = []
    start = 0
    for t in tensors:
        stop = start + t.shape[ax]
        idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(data.ndim))
        parents.append((t, lambda g, idx=idx: getitem(g, idx)))
        start = stop
    return _make(data, parents)


# ---------------------------------------------------------------- differentiation


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs, grad_output=None, create_graph=False):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    ``output`` is usually a scalar; otherwise ``grad_output`` supplies the
    upstream vector.  With ``create_graph`` the returned tensors carry their
    own graph and can be differentiated again.
    """
    single = isinstance(inputs, Tensor)
    if single:
        inputs = [inputs]
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad of a non-scalar output needs grad_output")
        grad_output = Tensor(np.ones_like(output.data))
    else:
        grad_output = as_tensor(grad_output)

    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = create_graph
    try:
        grads = {id(output): grad_output}
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                prior = grads.get(id(parent))
                grads[id(parent)] = contrib if prior is None else add(prior, contrib)
    finally:
        _GRAD_ENABLED = prev

    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor(np.zeros_like(x.data))
        elif not create_graph:
            g = Tensor(g.data)
        result.append(g)
    return result[0] if single else result


def hvp(fn, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of scalar ``fn`` at ``x`` along ``v``."""
    xt = Tensor(x, requires_grad=True)
    g = grad(fn(xt), xt, create_graph=True)
    return grad((g * Tensor(v)).sum(), xt).data


def value_and_grad(fn, x: np.ndarray):
    xt = Tensor(x, requires_grad=True)
    out = fn(xt)
    return out.item(), grad(out, xt).data
