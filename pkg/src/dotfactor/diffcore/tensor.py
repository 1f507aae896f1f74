"""Dense tensors with tape-based reverse-mode differentiation."""

import threading
from contextlib import contextmanager

import numpy as np

from .. import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tape:
    """Ordered record of operations; each entry is (output, inputs, backward_fn).

    Entries are appended as operations execute, so every entry's inputs were
    produced by earlier entries (or are leaves).
    """

    def __init__(self):
        self.ops = []

    def record(self, out, inputs, backward_fn):
        out._recorded = True
        self.ops.append((out, inputs, backward_fn))

    def reset(self):
        # intermediates of a consumed tape behave as constants from here on
        for out, _, _ in self.ops:
            out._recorded = False
            out.requires_grad = False
        self.ops = []

    def __len__(self):
        return len(self.ops)


_local = threading.local()


def current_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _check_finite(arr, name):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output in {name}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        arr = np.array(data, dtype=dtype, copy=True)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._recorded = False

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._recorded = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._recorded

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    if like is not None:
        dtype = like.dtype
    elif isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    else:
        dtype = np.float32
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _result(arr, name, inputs, backward_fn):
    _check_finite(arr, name)
    track = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=track)
    if track:
        current_tape().record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _bcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


# ---- binary elementwise ----

def add(a, b):
    a, b = _pair(a, b)
    _bcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    _bcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    _bcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _pair(a, b)
    _bcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(out, "div", (a, b), back)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def matmul(a, b):
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---- unary elementwise ----

def neg(x):
    return _result(-x.data, "neg", (x,), lambda g: (-g,))


def relu(x):
    mask = x.data > 0
    return _result(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def _sigmoid_np(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype, copy=False)


def sigmoid(x):
    s = _sigmoid_np(x.data)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


def tanh(x):
    t = np.tanh(x.data)
    return _result(t, "tanh", (x,), lambda g: (g * (1 - t * t),))


def exp(x):
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _result(e, "exp", (x,), lambda g: (g * e,))


def log(x):
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log of non-positive input")
    return _result(np.log(xd), "log", (x,), lambda g: (g / xd,))


def square(x):
    xd = x.data
    return _result(xd * xd, "square", (x,), lambda g: (2 * g * xd,))


def clip(x, lo, hi):
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    return _result(np.clip(xd, lo, hi).astype(xd.dtype, copy=False), "clip", (x,),
                   lambda g: (g * mask,))


# ---- reductions and shape ops ----

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    axes = _norm_axis(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), "sum", (x,), back)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _result(out, "reshape", (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(out, "concat", tuple(tensors), back)


def slice_(x, start, stop, axis=0):
    ndim = x.data.ndim
    axis %= ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(ndim))
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _result(x.data[idx], "slice", (x,), back)


# ---- fused losses ----

def bce_with_logits(logits, target):
    """Per-row summed Bernoulli cross-entropy of ``target`` under ``sigmoid(logits)``."""
    target = as_tensor(target, logits)
    if logits.shape != target.shape or logits.data.ndim != 2:
        raise ShapeError(f"bce_with_logits: shapes {logits.shape} vs {target.shape}")
    loss, dlogits = kernels.bce_logits(logits.data, target.data)
    return _result(loss.astype(logits.dtype), "bce_with_logits", (logits,),
                   lambda g: (g[:, None] * dlogits,))


# ---- backward ----

def backward(loss):
    """Populate ``.grad`` on every tracked leaf reachable from scalar ``loss``.

    Consumes the current tape. Returns ``{id(leaf): grad}`` for convenience.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss._recorded:
        tape.reset()
        raise ValueError("loss is detached from the tape (no tracked inputs)")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    try:
        for out, inputs, fn in reversed(tape.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._recorded:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                    leaves[id(inp)] = inp.grad
    finally:
        tape.reset()
    return leaves
