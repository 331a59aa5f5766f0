"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each :class:`Tensor` wraps an ``ndarray``. Operations on tensors that require
gradients record a closure which, given the gradient of the output, adds
the gradients of the inputs. :meth:`Tensor.backward` walks the recorded graph
in reverse topological order.

The dtype of the wrapped arrays is preserved, so the same code runs in
float32 for training and in float64 for finite-difference checks.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import GraphNotBuilt, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x):
    if isinstance(x, np.ndarray):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "biu":
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate gradients of this tensor into every leaf that requires them."""
        if not self.requires_grad:
            raise GraphNotBuilt("tensor does not require grad; no graph was recorded")
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # interior nodes hold gradients only transiently
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
        if needs:
            out._backward = backward
        return out

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = _operand(other, self)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _operand(other, self)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other):
        return _operand(other, self) - self

    def __mul__(self, other):
        other = _operand(other, self)
        x, y = self.data, other.data
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _operand(other, self)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return _operand(other, self) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(ensure_tensor(other), self)

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype
        parts = idx if isinstance(idx, tuple) else (idx,)
        fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor._make(self.data[idx], (self,), backward, "getitem")

    # -- reductions and shape ------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose"
        )

    @property
    def T(self):
        return self.transpose()

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    # -- unary functions -----------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def relu(self):
        x = self.data
        return Tensor._make(np.maximum(x, 0), (self,), lambda g: (g * (x > 0),), "relu")

    def softplus(self):
        x = self.data
        out = np.logaddexp(0, x)
        sig = 0.5 * (1 + np.tanh(0.5 * x))
        return Tensor._make(out.astype(x.dtype), (self,), lambda g: (g * sig,), "softplus")


def ensure_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _operand(other, like):
    """Python scalars take the dtype of the tensor they combine with."""
    if isinstance(other, (int, float)) and not isinstance(other, bool):
        return Tensor(np.asarray(other, dtype=like.dtype))
    return ensure_tensor(other)


def matmul(a, b):
    a, b = ensure_tensor(a), ensure_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeMismatch("matmul expects operands with at least 2 dimensions")

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._make(x @ y, (a, b), backward, "matmul")


def concat(tensors, axis=0):
    tensors = [ensure_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat"
    )


def stack(tensors, axis=0):
    tensors = [ensure_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack"
    )


def where(mask, a, b):
    a, b = ensure_tensor(a), ensure_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return Tensor._make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(np.where(mask, 0, g), b.shape)),
        "where",
    )


def cross(a, b):
    """Cross product along the last axis (size 3)."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    x, y = a.data, b.data
    # d(x × y) · g: gx = y × g, gy = g × x
    return Tensor._make(
        np.cross(x, y),
        (a, b),
        lambda g: (_unbroadcast(np.cross(y, g), x.shape), _unbroadcast(np.cross(g, x), y.shape)),
        "cross",
    )


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation on NHWC input with (kh, kw, c_in, c_out) weights."""
    x, w = ensure_tensor(x), ensure_tensor(w)
    xd, wd = x.data, w.data
    n, h, wid, c = xd.shape
    kh, kw, ci, o = wd.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight expects {ci}")
    p = padding
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wid + 2 * p - kw) // stride + 1
    # windows come out as (n, ho, wo, c, kh, kw); reorder to match the weight layout
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    wmat = wd.reshape(kh * kw * c, o)
    out = cols @ wmat
    if b is not None:
        b = ensure_tensor(b)
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.reshape(n * ho * wo, o)
        gw = (cols.T @ gmat).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, i, j]
            gx = gxp[:, p : p + h, p : p + wid] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return Tensor._make(out.reshape(n, ho, wo, o), parents, backward, "conv2d")


def logsumexp(x, axis=-1):
    """Log-sum-exp with the maximum subtracted before exponentiation."""
    x = ensure_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = (x - Tensor(m)).exp().sum(axis=axis).log()
    return shifted + Tensor(np.squeeze(m, axis=axis))
