"""Minimal dense-array engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for gradient
checking). Ops record a DAG when any input requires grad; `backward` on a
scalar walks it once in reverse topological order and frees it. Broadcasting
follows numpy's trailing-dimension alignment and nothing more.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeMismatch(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data, parents, backward):
        """Result tensor of an op. `backward(grad)` returns one gradient array
        (or None) per parent; the node is recorded only if some parent needs it."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None  # allocated lazily during backward
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeMismatch(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not require grad; nothing to differentiate")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            node._parents = ()
            node._backward = None  # graph is single-use; free it

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or (np.asarray(x).dtype if isinstance(x, np.ndarray) else DEFAULT_DTYPE))


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )
    return Tensor.from_op(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, p):
    """Elementwise a**p for a plain-number exponent."""
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    return Tensor.from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    def backward(g):
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        )
    return Tensor.from_op(out, (a, b), backward)


# -- shape ops --------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(a, key):
    """Basic (non-fancy) indexing with gradient scatter on the way back."""
    a = as_tensor(a)
    out = a.data[key]
    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)
    return Tensor.from_op(out, (a,), backward)


# -- reductions -------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)
    return Tensor.from_op(np.asarray(out), (a,), backward)


def _axis_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    if isinstance(axis, tuple):
        return int(np.prod([shape[i] for i in axis]))
    return shape[axis]


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = _axis_count(a.shape, axis)
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; ties split gradient equally among argmax positions."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)
    def backward(g):
        full_out = out if (keepdims or axis is None) else np.expand_dims(out, axis)
        hit = (a.data == full_out).astype(a.data.dtype)
        hit /= hit.sum(axis=axis, keepdims=True) if axis is not None else hit.sum()
        g2 = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        return (hit * g2,)
    return Tensor.from_op(np.asarray(out), (a,), backward)


# -- contractions --------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeMismatch("matmul requires at least 1-D operands")
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ad = ad[None, :]
        if bd.ndim == 1:
            bd = bd[:, None]
        g2 = g
        if a.data.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.data.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g2
        if a.data.ndim == 1:
            ga = ga.reshape(a.shape)
        else:
            ga = _unbroadcast(ga, a.shape)
        if b.data.ndim == 1:
            gb = gb.reshape(b.shape)
        else:
            gb = _unbroadcast(gb, b.shape)
        return (ga, gb)
    return Tensor.from_op(out, (a, b), backward)


# -- verification harness ---------------------------------------------------------------

def grad_check(f, x, h=1e-5, dtype=np.float64):
    """Max relative error between analytic and central-difference gradients.

    `f` maps one Tensor to a scalar Tensor. Run in float64: central
    differences are meaningless at float32 precision.
    """
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    xt = Tensor(x0.copy(), requires_grad=True, dtype=dtype)
    out = f(xt)
    out.backward()
    analytic = xt.grad.copy()

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(x0.copy(), dtype=dtype)).data)
        flat[i] = orig - h
        lo = float(f(Tensor(x0.copy(), dtype=dtype)).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * h)

    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > 1e-6, diff / np.maximum(scale, 1e-300), diff)
    return float(rel.max()) if rel.size else 0.0
