"""Tape-based reverse-mode differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` only when one is
open and at least one input requires a gradient; outside a tape they are
plain numpy computations, which keeps inference cheap and thread-safe.
"""
from __future__ import annotations

import contextvars
import math

import numpy as np
from scipy.special import erf

MAX_RANK = 3


class NumericError(ArithmeticError):
    """A non-finite value appeared in a tensor."""


class ShapeError(ValueError):
    """Incompatible tensor extents."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape."""


_active_tape: contextvars.ContextVar = contextvars.ContextVar("mvfuse_tape", default=None)


class Tensor:
    """Dense array of rank <= 3 with finite entries.

    ``param`` links a leaf tensor back to the :class:`~mvfuse.nn.params.ParamTensor`
    it was read from, so that backward can deposit gradients there.
    """

    __slots__ = ("data", "requires_grad", "param")
    # make ``ndarray + Tensor`` dispatch to Tensor.__radd__ instead of broadcasting objects
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, param=None):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        if 0 in arr.shape:
            raise ShapeError(f"empty extent in shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("non-finite value in tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Records primitive operations for a later :meth:`backward`.

    Use as a context manager::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss, store)
    """

    def __init__(self):
        self._records = []
        self._leaves = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out, inputs, fn):
        for t in inputs:
            if t.param is not None and t.requires_grad:
                self._leaves.append(t)
        self._records.append((out, inputs, fn))

    def backward(self, loss: Tensor, store=None) -> None:
        """Accumulate d(loss)/d(param) into every trainable parameter's ``grad``.

        Trainable parameters of ``store`` that are not on the path to ``loss``
        end up with an all-zero gradient.
        """
        if not self._records:
            raise TapeError("backward called without a recorded forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any trainable parameter")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if store is not None:
            for p in store.values():
                if p.trainable and p.grad is None:
                    p.grad = np.zeros_like(p.value)
        seen = set()
        for leaf in self._leaves:
            if id(leaf) in seen:
                continue
            seen.add(id(leaf))
            g = grads.get(id(leaf))
            p = leaf.param
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
            if g is not None:
                p.grad += g.astype(p.value.dtype, copy=False)


def backward(loss: Tensor, store=None) -> None:
    """Run backward on the currently open tape."""
    tape = _active_tape.get()
    if tape is None:
        raise TapeError("backward called without a recorded forward pass")
    tape.backward(loss, store)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b):
    """Coerce bare scalars/arrays to the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(data, inputs, fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    if (x.data == 0).any():
        raise NumericError("reciprocal of zero")
    y = 1.0 / x.data
    return _make(y, (x,), lambda g: (-g * y * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise NumericError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    y = x.data * cdf

    def fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(y.astype(x.dtype, copy=False), (x,), fn)


def identity(x) -> Tensor:
    return as_tensor(x)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), fn)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


# -- shape -------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, key) -> Tensor:
    x = as_tensor(x)

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(x.data[key]), (x,), fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), fn)


# -- reductions --------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    y = x.data.mean(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(y, (x,), fn)


def max(x, axis: int) -> Tensor:  # noqa: A001
    """Max over one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(y, (x,), fn)


# -- fused normalisation -----------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shape mismatch for width {d}")
    if eps < 0 or (d < 2 and eps == 0):
        raise ValueError("layer_norm needs eps > 0 when the width is 1")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0 and (var == 0).any():
        raise NumericError("zero variance row with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def fn(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(y, (x, gamma, beta), fn)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise NumericError("cannot normalise a zero vector")
    y = x.data / norm

    def fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), fn)


# -- attention ---------------------------------------------------------------


def _split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = a.shape
    return np.swapaxes(a.reshape(*lead, n, heads, d // heads), -2, -3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    *lead, h, n, hd = a.shape
    return np.swapaxes(a, -2, -3).reshape(*lead, n, h * hd)


def attention(q, k, v, heads: int):
    """Multi-head scaled dot-product attention on already-projected inputs.

    ``q`` is (..., m, d); ``k`` and ``v`` are (..., n, d).  Each head sees a
    contiguous d/heads slice.  Returns the concatenated head outputs as a
    tensor and the attention weights (..., heads, m, n) as a plain array.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention width mismatch: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values differ in length")
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    scale = 1.0 / math.sqrt(d // heads)
    qh, kh, vh = (_split_heads(a.data, heads) for a in (q, k, v))
    s = np.matmul(qh, np.swapaxes(kh, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=-1, keepdims=True)
    oh = np.matmul(w, vh)

    def fn(g):
        gh = _split_heads(g, heads)
        gw = np.matmul(gh, np.swapaxes(vh, -1, -2))
        gvh = np.matmul(np.swapaxes(w, -1, -2), gh)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gqh = np.matmul(gs, kh)
        gkh = np.matmul(np.swapaxes(gs, -1, -2), qh)
        return (
            _unbroadcast(_merge_heads(gqh), q.shape),
            _unbroadcast(_merge_heads(gkh), k.shape),
            _unbroadcast(_merge_heads(gvh), v.shape),
        )

    out = _make(_merge_heads(oh), (q, k, v), fn)
    return out, w
