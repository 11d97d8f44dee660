"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation builds a node holding its inputs and a
closure that maps the output adjoint to input adjoints.  Values are
float64 throughout; the finite-difference-based physics losses lose
signal in float32.
"""

from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """Raised for log/sqrt of negative arguments."""


class Tensor:
    """A value in the computation graph.

    Leaves (parameters) are created with ``requires_grad=True``;
    intermediate nodes inherit the flag from their parents.
    """

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "name")

    # Make numpy defer binary ops to Tensor's reflected operators.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def detach(self):
        return Tensor(self.value.copy())

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents=parents, backward=backward)
    return Tensor(value)


# -- primitives ---------------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)
    out = a.value + b.value

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _node(out, (a, b), bw)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out = a.value * b.value

    def bw(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return _node(out, (a, b), bw)


def div(a, b):
    a, b = astensor(a), astensor(b)
    out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.value.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _node(out, (a, b), bw)


def power(a, exponent):
    a = astensor(a)
    exponent = float(exponent)
    out = a.value ** exponent

    def bw(g):
        return (g * exponent * a.value ** (exponent - 1.0),)

    return _node(out, (a,), bw)


def exp(a):
    a = astensor(a)
    out = np.exp(a.value)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), bw)


def log(a):
    a = astensor(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(a.value)

    def bw(g):
        return (g / a.value,)

    return _node(out, (a,), bw)


def sqrt(a):
    a = astensor(a)
    if np.any(a.value < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.value)

    def bw(g):
        return (g * 0.5 / np.maximum(out, 1e-300),)

    return _node(out, (a,), bw)


def maximum(a, b):
    a, b = astensor(a), astensor(b)
    out = np.maximum(a.value, b.value)
    mask = a.value >= b.value

    def bw(g):
        return (_unbroadcast(g * mask, a.value.shape),
                _unbroadcast(g * (~mask), b.value.shape))

    return _node(out, (a, b), bw)


def minimum(a, b):
    a, b = astensor(a), astensor(b)
    out = np.minimum(a.value, b.value)
    mask = a.value <= b.value

    def bw(g):
        return (_unbroadcast(g * mask, a.value.shape),
                _unbroadcast(g * (~mask), b.value.shape))

    return _node(out, (a, b), bw)


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def relu(a):
    a = astensor(a)
    mask = a.value > 0.0
    out = a.value * mask

    def bw(g):
        return (g * mask,)

    return _node(out, (a,), bw)


def softplus(a):
    a = astensor(a)
    out = np.logaddexp(0.0, a.value)
    sig = 1.0 / (1.0 + np.exp(-a.value))

    def bw(g):
        return (g * sig,)

    return _node(out, (a,), bw)


def sigmoid(a):
    a = astensor(a)
    out = 1.0 / (1.0 + np.exp(-a.value))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bw)


def tanh(a):
    a = astensor(a)
    out = np.tanh(a.value)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.value.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.value.shape),)

    return _node(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    out = a.value @ b.value

    def bw(g):
        ga = g @ b.value.T if b.value.ndim == 2 else np.outer(g, b.value)
        gb = a.value.T @ g
        return ga, gb

    return _node(out, (a, b), bw)


def reshape(a, shape):
    a = astensor(a)
    out = a.value.reshape(shape)

    def bw(g):
        return (g.reshape(a.value.shape),)

    return _node(out, (a,), bw)


def transpose(a, axes=None):
    a = astensor(a)
    out = np.transpose(a.value, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), bw)


def getitem(a, key):
    a = astensor(a)
    out = a.value[key]

    keys = key if isinstance(key, tuple) else (key,)
    basic = all(k is Ellipsis or k is None or isinstance(k, (int, np.integer, slice))
                for k in keys)

    def bw(g):
        buf = np.zeros_like(a.value)
        if basic:
            buf[key] = g          # basic indexing never aliases entries
        else:
            np.add.at(buf, key, g)
        return (buf,)

    return _node(out, (a,), bw)


def concatenate(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _node(out, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out = np.stack([t.value for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), bw)


def cumsum(a, axis):
    a = astensor(a)
    out = np.cumsum(a.value, axis=axis)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _node(out, (a,), bw)


def gather_rows(a, idx):
    """Select rows of a 2D array by a constant integer index array."""
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.value[idx]

    def bw(g):
        return (scatter_rows(g, idx, a.value.shape),)

    return _node(out, (a,), bw)


def scatter_rows(g, idx, shape):
    """Sum rows of ``g`` into a zeroed array of ``shape`` at ``idx``
    (transpose of a row gather).  bincount is much faster than np.add.at."""
    if len(shape) == 2:
        buf = np.empty(shape)
        for r in range(shape[1]):
            buf[:, r] = np.bincount(idx, weights=g[:, r], minlength=shape[0])
        return buf
    buf = np.zeros(shape)
    np.add.at(buf, idx, g)
    return buf


def node(value, parents, backward_fn):
    """Public hook for fused custom operations."""
    return _node(value, tuple(parents), backward_fn)


# -- backward pass ------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable node."""
    loss = astensor(loss)
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")

    topo = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            # Accumulate out of place: backward outputs may be views, and
            # nothing ever mutates a grad array once bound.
            parent.grad = g if parent.grad is None else parent.grad + g


# -- parameter storage --------------------------------------------------

class ParamStore:
    """Named parameter leaves with persistent values and gradient buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def replace(self, name, value):
        """Swap the value of a parameter (e.g. after a grid upsample)."""
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def grads(self):
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for n, p in self._params.items()}

    def state_arrays(self):
        return {n: p.value for n, p in self._params.items()}


def grad_check(lossfn, store, n_probes=50, h=1e-5, rng=None):
    """Compare tape gradients with central differences on sampled parameters.

    ``lossfn`` must be deterministic and return a scalar Tensor built from
    the parameters in ``store``.  Returns a report dict with the maximum
    relative error observed.
    """
    rng = np.random.default_rng(rng)
    store.zero_grad()
    backward(lossfn())
    analytic = store.grads()

    entries = []
    names = store.names()
    for _ in range(n_probes):
        name = names[rng.integers(len(names))]
        p = store[name]
        flat = rng.integers(p.value.size)
        entries.append((name, int(flat)))

    worst = (0.0, None)
    results = []
    for name, flat in entries:
        p = store[name]
        orig = p.value.flat[flat]
        p.value.flat[flat] = orig + h
        f_plus = float(lossfn().value)
        p.value.flat[flat] = orig - h
        f_minus = float(lossfn().value)
        p.value.flat[flat] = orig
        g_fd = (f_plus - f_minus) / (2.0 * h)
        g_ad = analytic[name].flat[flat]
        rel = abs(g_fd - g_ad) / max(abs(g_fd), abs(g_ad), 1e-6)
        results.append((name, flat, g_ad, g_fd, rel))
        if rel > worst[0]:
            worst = (rel, (name, flat, g_ad, g_fd))

    return {
        "n_checked": len(results),
        "max_rel_error": worst[0],
        "worst": worst[1],
        "results": results,
    }
