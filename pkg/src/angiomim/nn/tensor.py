"""A small reverse-mode autodiff engine on numpy arrays.

Each op computes its forward value eagerly and, when any input needs a
gradient, records a closure that maps the output gradient to input
gradients.  ``backward`` walks the graph in reverse topological order and
accumulates into ``.grad`` additively.
"""

import contextlib
import threading

import numpy as np
from scipy.special import erf


class _State(threading.local):
    # Per thread, so concurrent inference under no_grad cannot leave another
    # thread's recording switched off.
    grad_enabled = True
    kink_log = None


_STATE = _State()


def is_grad_enabled():
    return _STATE.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (for the calling thread)."""
    prev, _STATE.grad_enabled = _STATE.grad_enabled, False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op evaluated inside.

    relu and clip append a boolean array telling which side of their kink
    each element fell on; two evaluations with different patterns straddle a
    kink and cannot be compared by finite differences.
    """
    prev, _STATE.kink_log = _STATE.kink_log, []
    try:
        yield _STATE.kink_log
    finally:
        _STATE.kink_log = prev


def _log_kink(pattern):
    if _STATE.kink_log is not None:
        _STATE.kink_log.append(np.asarray(pattern, dtype=bool).copy())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basics -------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def tensor(data, dtype=None):
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)


def _const(x, like):
    """Wrap a non-tensor operand in the dtype of `like`."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._parents = ()
    out._backward = None
    out.grad = None
    out.requires_grad = False
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast("div", a, b)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def power(a, p):
    p = float(p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, (a,), bw)


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    on = a.data > 0
    _log_kink(on)
    return _make(np.where(on, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * on,))


def clip(a, lo, hi):
    inside = (a.data > lo) & (a.data < hi)
    _log_kink(inside)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make((x * cdf).astype(a.dtype), (a,), lambda g: (g * (cdf + x * pdf),))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def layernorm(a, axis=-1, eps=1e-5):
    """Normalize to zero mean and unit variance along `axis` (no affine)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True, dtype=np.float64)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True, dtype=np.float64)
        gx = (g * xhat).mean(axis=axis, keepdims=True, dtype=np.float64)
        return ((inv * (g - gm - xhat * gx)).astype(x.dtype),)

    return _make(xhat, (a,), bw)


def bce_with_logits(logits, target):
    """Mean binary cross-entropy of sigmoid(logits) against a constant target."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"bce_with_logits: target {t.shape} != logits {logits.shape}")
    x = logits.data
    loss = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0) - x * t
    prob = 0.5 * (1.0 + np.tanh(0.5 * x))

    def bw(g):
        return (g * (prob - t) / x.size,)

    return _make(np.asarray(loss.mean(dtype=np.float64)), (logits,), bw)


# ---------------------------------------------------------------------------
# reductions (accumulate in float64)

def _reduced_dtype(a, axis):
    return np.float64 if axis is None else a.dtype


def sum(a, axis=None, keepdims=False):
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64),
                     dtype=_reduced_dtype(a, axis))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64),
                     dtype=_reduced_dtype(a, axis))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw)


def take(a, indices, axis=0):
    """Gather along `axis`; repeated indices accumulate their gradients."""
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, idx, gm)
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def conv2d(x, w, b=None):
    """Stride-1 'same' convolution (cross-correlation) of NCHW input.

    `w` has shape (C_out, C_in, k, k) with odd k; zero padding.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    r = k // 2
    n, _, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros((n, w.shape[0], h, wd), dtype=np.result_type(x.data, w.data))
    for i in range(k):
        for j in range(k):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + h, j:j + wd], w.data[:, :, i, j],
                             optimize=True)
    parents = (x, w)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        out += b.data[None, :, None, None]
        parents = (x, w, b)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(k):
            for j in range(k):
                win = xp[:, :, i:i + h, j:j + wd]
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, win, optimize=True)
                gxp[:, :, i:i + h, j:j + wd] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j],
                                                          optimize=True)
        grads = (gxp[:, :, r:r + h, r:r + wd], gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, bw)


def avg_pool2(x):
    """2x2 average pooling of NCHW input."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial dims {h}x{w} must be even")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), bw)


def upsample2(x):
    """Nearest-neighbour 2x upsampling of NCHW input."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g.astype(node.data.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
