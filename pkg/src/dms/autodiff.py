"""Tape-style reverse-mode automatic differentiation over dense float64 arrays.

Every operation on a :class:`Tensor` that has a ``requires_grad`` input is
recorded as a node carrying its parents and a closure that maps the output
gradient to input gradients.  Node ids grow monotonically, so reverse id order
is a valid reverse topological order and backward passes are deterministic.

Broadcasting is restricted to size-1 axis expansion between operands of equal
rank, which covers every mask-times-activation pattern used by the models.
"""

import itertools
import threading

import numpy as np

_ids = itertools.count()
_local = threading.local()


class no_grad:
    """Context manager that stops recording operations on the current thread."""

    def __enter__(self):
        self._prev = getattr(_local, "enabled", True)
        _local.enabled = False

    def __exit__(self, *exc):
        _local.enabled = self._prev


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "retain_grad", "op", "_parents", "_backward", "_id")
    # make numpy scalars and arrays defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        self.grad = None
        self.requires_grad = requires_grad
        self.retain_grad = False
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _wrap(arr):
    # internal results are fresh arrays; skip the defensive copy
    t = Tensor.__new__(Tensor)
    t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
    t.grad = None
    t.requires_grad = False
    t.retain_grad = False
    t.op = "leaf"
    t._parents = ()
    t._backward = None
    t._id = next(_ids)
    return t


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = arr.reshape((1,) * like.ndim)
    return Tensor(arr)


def _record(out, parents, backward_fn, op):
    if getattr(_local, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _broadcast_shape(sa, sb, op):
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch {sa} vs {sb}")
    out = []
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(grad, shape):
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    out = _wrap(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    out = _wrap(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    out = _wrap(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw, "mul")


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def scale(x, c):
    c = float(c)
    out = _wrap(x.data * c)
    return _record(out, (x,), lambda g: (g * c,), "scale")


def sigmoid(x):
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _wrap(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x):
    pos = x.data > 0
    out = _wrap(np.where(pos, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * pos,), "relu")


def log(x):
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min()})")
    out = _wrap(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,), "log")


def exp(x):
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    if not np.all(np.isfinite(e)):
        raise DomainError(f"exp overflow (max input {x.data.max()})")
    out = _wrap(e)
    return _record(out, (x,), lambda g: (g * e,), "exp")


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims=False):
    if axis is None:
        out = _wrap(np.array([x.data.sum()]))

        def bw(g):
            return (np.broadcast_to(g.reshape(-1)[0], x.shape).copy(),)

    else:
        out = _wrap(x.data.sum(axis=axis, keepdims=keepdims))

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape


def reshape(x, shape):
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    out = _wrap(data)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _wrap(x.data.transpose(axes))
    return _record(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def slice_(x, index):
    """Basic or integer-array indexing; repeated indices accumulate in backward."""
    out = _wrap(x.data[index])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(out, (x,), bw, "slice")


def take(x, indices, axis):
    indices = np.asarray(indices, dtype=np.intp)
    out = _wrap(np.take(x.data, indices, axis=axis))

    def bw(g):
        full = np.zeros_like(x.data)
        idx = [slice(None)] * x.ndim
        idx[axis] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _record(out, (x,), bw, "take")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """(..., m, k) @ (..., k, n); ``b`` may also be a plain 2-D matrix shared over the batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    out = _wrap(a.data @ b.data)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- losses


def softmax(x):
    """Softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _wrap(s)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``(B, C)`` logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (B, C), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    out = _wrap(np.array([-logp[rows, labels].mean()]))

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g.reshape(-1)[0] / len(labels)),)

    return _record(out, (logits,), bw, "softmax_cross_entropy")


def mse(pred, target):
    diff = sub(pred, as_tensor(target))
    return mean(mul(diff, diff))


# ---------------------------------------------------------------- backward


def graph(root):
    """Nodes reachable from ``root`` in recording (topological) order."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    return [seen[i] for i in sorted(seen)]


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {root._id: np.ones_like(root.data)}
    for node in reversed(graph(root)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf or node.retain_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def grad_check(fn, point, eps=1e-5):
    """Max relative error between autodiff and central differences of ``fn`` at ``point``.

    The per-coordinate error is ``|ga - gn| / max(1, |ga|, |gn|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = fn(leaf)
    if not np.all(np.isfinite(out.data)):
        raise DomainError("function is not finite at the check point")
    backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = fn(Tensor(xp.reshape(x0.shape))).item()
        fm = fn(Tensor(xm.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite evaluation at coordinate {i}")
        flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
