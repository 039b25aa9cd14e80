"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds a new :class:`Tensor` holding its value and a closure that
pushes the output adjoint back to its parents. :meth:`Tensor.backward`
walks the graph in reverse topological order. Only the ops needed by the
graph normalizer, the U-Net decoder and the metadata MLP are provided.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``d self / d leaf`` into ``leaf.grad`` for all reachable leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior adjoints are no longer needed
                    node.grad = None

    # operator sugar
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
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(p for p in parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def absolute(x):
    x = as_tensor(x)
    sign = np.sign(x.data)

    def backward(g):
        x._accumulate(g * sign)

    return _make(np.abs(x.data), (x,), backward)


def square(x):
    x = as_tensor(x)

    def backward(g):
        x._accumulate(2.0 * g * x.data)

    return _make(x.data * x.data, (x,), backward)


def sqrt(x):
    """Square root whose derivative is defined as 0 at exactly 0."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        x._accumulate(g * d)

    return _make(out, (x,), backward)


def softplus(x):
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)

    def backward(g):
        # logistic sigmoid, overflow-safe
        s = np.exp(-np.logaddexp(0.0, -x.data))
        x._accumulate(g * s)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- reductions

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def tmax(x, axis):
    """Max reduction; tied maxima share the adjoint equally."""
    x = as_tensor(x)
    out = x.data.max(axis=axis, keepdims=True)
    mask = x.data == out
    mask = mask / mask.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(mask * np.expand_dims(g, axis))

    return _make(np.squeeze(out, axis=axis), (x,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), backward)


def getitem(x, idx):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx], (x,), backward)


def pad(x, widths):
    """Zero-pad with numpy ``pad_width`` semantics."""
    x = as_tensor(x)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))

    def backward(g):
        x._accumulate(g[sl])

    return _make(np.pad(x.data, widths), (x,), backward)


def concat(xs, axis):
    xs = [as_tensor(t) for t in xs]
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        for t, part in zip(xs, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


# ---------------------------------------------------------------- contraction

def _einsum_grad(target, others, out_subs, g, operands, shape):
    """Adjoint of one einsum operand: reuse einsum, broadcasting summed-only axes."""
    present = set(out_subs).union(*[set(s) for s in others])
    kept = "".join(c for c in target if c in present)
    spec = ",".join([out_subs] + list(others)) + "->" + kept
    r = np.einsum(spec, g, *operands, optimize=True)
    if kept != target:
        for i, c in enumerate(target):
            if c not in present:
                r = np.expand_dims(r, i)
        r = np.broadcast_to(r, shape)
    return r


def einsum(subscripts, *operands):
    """Differentiable ``np.einsum`` for explicit-output specs without repeated indices."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_subs = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    for s in in_subs:
        if len(set(s)) != len(s) or "." in s:
            raise ValueError(f"unsupported einsum operand spec {s!r}")
    out = np.einsum(subscripts, *[o.data for o in ops], optimize=True)

    def backward(g):
        for i, o in enumerate(ops):
            if not o.requires_grad:
                continue
            others = in_subs[:i] + in_subs[i + 1:]
            other_data = [p.data for j, p in enumerate(ops) if j != i]
            o._accumulate(_einsum_grad(in_subs[i], others, out_subs, g, other_data, o.shape))

    return _make(out, ops, backward)


# ---------------------------------------------------------------- image ops

def conv2d_same(x, w, b=None):
    """3x3 (or any odd) 'same' convolution, NCHW input, OIKK weight.

    Built from shifted slices and einsum so the tape handles the adjoint.
    """
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[2]
    p = k // 2
    h, wd = x.shape[2], x.shape[3]
    xp = pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = None
    for a in range(k):
        for c in range(k):
            patch = xp[:, :, a:a + h, c:c + wd]
            term = einsum("bchw,oc->bohw", patch, w[:, :, a, c])
            out = term if out is None else out + term
    if b is not None:
        out = out + reshape(as_tensor(b), (1, -1, 1, 1))
    return out


def conv1x1(x, w, b=None):
    out = einsum("bchw,oc->bohw", x, w)
    if b is not None:
        out = out + reshape(as_tensor(b), (1, -1, 1, 1))
    return out


def max_pool2(x):
    x = as_tensor(x)
    b, c, h, w = x.shape
    blocks = reshape(x, (b, c, h // 2, 2, w // 2, 2))
    return tmax(tmax(blocks, 5), 3)


def conv_transpose2(x, w, b=None):
    """Kernel-2 stride-2 transposed convolution; ``w`` has shape (in, out, 2, 2)."""
    x = as_tensor(x)
    bsz, _, h, wd = x.shape
    o = w.shape[1]
    y = einsum("bkij,kopq->boipjq", x, w)
    out = reshape(y, (bsz, o, 2 * h, 2 * wd))
    if b is not None:
        out = out + reshape(as_tensor(b), (1, -1, 1, 1))
    return out


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalization over the spatial axes."""
    mu = mean(x, axis=(2, 3), keepdims=True)
    xc = x - mu
    var = mean(square(xc), axis=(2, 3), keepdims=True)
    inv = _rsqrt(var + eps)
    return xc * inv * reshape(as_tensor(gamma), (1, -1, 1, 1)) + reshape(as_tensor(beta), (1, -1, 1, 1))


def _rsqrt(x):
    x = as_tensor(x)
    out = 1.0 / np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * (-0.5) * out ** 3)

    return _make(out, (x,), backward)
