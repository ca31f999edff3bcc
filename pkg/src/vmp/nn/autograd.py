"""Tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Var` records its parents and a closure that maps the upstream
gradient to parent gradients. :func:`backward` walks the graph in reverse
topological order.
"""

import numpy as np

from vmp import _accel
from vmp.errors import ContractError


class Var:
    __slots__ = ("value", "parents", "grad_fn", "name")
    __array_priority__ = 100

    def __init__(self, value, parents=(), grad_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def param(value, name):
    """Leaf variable tracked by name for :func:`backward`."""
    return Var(np.array(value, dtype=np.float64), name=name)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(value, inputs, grad_fn):
    """Build a node; constant inputs get ``None`` gradients and are dropped."""
    if not any(isinstance(v, Var) for v in inputs):
        return np.asarray(value, dtype=np.float64)
    return Var(value, parents=inputs, grad_fn=grad_fn)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _make(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def neg(a):
    return _make(-value_of(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def reciprocal(a):
    av = value_of(a)
    out = 1.0 / av
    return _make(out, (a,), lambda g: (-g * out * out,))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def exp(a):
    out = np.exp(value_of(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a, floor=0.0):
    """Natural log; with ``floor > 0`` the input is clamped and the clamp has zero slope."""
    av = value_of(a)
    if floor > 0.0:
        clamped = np.maximum(av, floor)
        live = av > floor
        return _make(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    """Square root with a zero subgradient at exactly zero."""
    out = np.sqrt(value_of(a))
    safe = np.where(out > 0.0, out, 1.0)
    return _make(out, (a,), lambda g: (np.where(out > 0.0, 0.5 * g / safe, 0.0),))


def square(a):
    av = value_of(a)
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def relu(a):
    av = value_of(a)
    mask = av > 0.0
    return _make(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value_of(a)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(av.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        n = av.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([av.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    av = value_of(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, idx):
    av = value_of(a)

    def grad_fn(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return _make(av[idx], (a,), grad_fn)


def take(a, index):
    """Gather ``a[index]`` for a 1-D ``a`` and integer array ``index`` of any shape."""
    av = value_of(a)
    flat = index.ravel()
    return _make(av[index], (a,), lambda g: (np.bincount(flat, weights=g.ravel(), minlength=av.size),))


def log_softmax(z):
    """Row-wise log-softmax with max subtraction."""
    zv = value_of(z)
    shifted = zv - zv.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _make(out, (z,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def conv2d(x, k):
    xv, kv = value_of(x), value_of(k)
    out = _accel.conv2d_forward(xv, kv)

    def grad_fn(g):
        gx = _accel.conv2d_grad_input(g, kv) if isinstance(x, Var) else None
        gk = _accel.conv2d_grad_kernel(xv, g, kv.shape) if isinstance(k, Var) else None
        return gx, gk

    return _make(out, (x, k), grad_fn)


def _topo(root):
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
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, trainable=None):
    """Gradients of a scalar ``loss`` with respect to named leaves.

    Returns a dict name -> gradient array. When ``trainable`` is given, the
    result is keyed by exactly those names; a name absent from the graph
    raises :class:`ContractError`.
    """
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ContractError("backward needs a scalar Var loss")
    if not np.isfinite(loss.value).all():
        raise ContractError("loss is not finite")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.grad_fn is None:
            if node.name is not None:
                leaves[node.name] = g if g is not None else np.zeros_like(node.value)
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not isinstance(parent, Var) or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        # leaf accumulation happens when the leaf itself is popped
    if trainable is None:
        return leaves
    missing = [n for n in trainable if n not in leaves]
    if missing:
        raise ContractError(f"parameters not on the recorded graph: {sorted(missing)}")
    return {n: leaves[n] for n in trainable}
