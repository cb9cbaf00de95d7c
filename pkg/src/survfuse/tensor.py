"""Dense float64 tensors with reverse-mode automatic differentiation.

Small tape-based engine: every operation returns a new Tensor holding the
numpy result, references to its parents and a closure computing the
vector-Jacobian product. ``backward`` walks the graph once in reverse
topological order. Everything is CPU, float64 and single-threaded during
graph construction and backward.
"""

import math
import os

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_debug_checks = os.environ.get("SURVFUSE_DEBUG_NAN", "0") == "1"


def set_debug_checks(enabled):
    """Toggle NaN/Inf detection after every forward op (slow, for debugging)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """A node of the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "parents", "vjp", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = ()
        self.vjp = None
        self.requires_grad = requires_grad
        self.grad = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # operator sugar; all arithmetic routes through the module-level ops
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad or p.parents for p in parents):
        out.parents = tuple(parents)
        out.vjp = vjp
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite values produced by op {op!r}")
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add",
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        "sub",
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
        "div",
    )


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    return _make(
        a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow"
    )


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a):
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,), "sqrt")


def absolute(a):
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient is zero where the floor is active."""
    a = _as_tensor(a)
    floor = float(floor)
    mask = a.data > floor
    return _make(
        np.maximum(a.data, floor), (a,), lambda g: (g * mask,), "clamp_min"
    )


def gelu(a):
    """Gaussian-error linear unit, exact erf form."""
    a = _as_tensor(a)
    phi = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    out_data = a.data * phi

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (phi + a.data * pdf),)

    return _make(out_data, (a,), vjp, "gelu")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = _as_tensor(a)
    return _make(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),), "reshape"
    )


def permute(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute"
    )


def transpose(a):
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got shape {a.shape}")
    return _make(
        np.swapaxes(a.data, -1, -2),
        (a,),
        lambda g: (np.swapaxes(g, -1, -2),),
        "transpose",
    )


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat"
    )


# ---------------------------------------------------------------------------
# reductions and indexing


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.data.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp, "mean")


def cumsum(a, axis=-1):
    a = _as_tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), vjp, "cumsum")


def take_pairs(a, rows, cols):
    """Select a[rows[i], cols[i]] from a 2-D tensor; scatter-add on backward."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_pairs needs a 2-D tensor, got shape {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _make(a.data[rows, cols], (a,), vjp, "take_pairs")


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return (ga, gb)

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def softmax(a, axis=-1):
    """Numerically stabilized softmax; rejects non-finite input."""
    a = _as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains NaN or Inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), vjp, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.data.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs last-axis length >= 2, got {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def vjp(g):
        gg = g * gain.data
        gx = inv * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        ggain = _unbroadcast((g * xhat).sum(axis=axes), gain.data.shape)
        gbias = _unbroadcast(g.sum(axis=axes), bias.data.shape)
        return (gx, ggain, gbias)

    return _make(out_data, (x, gain, bias), vjp, "layer_norm")


def logsumexp(a, axis=-1, keepdims=False):
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_data = m + np.log(s)
    soft = np.exp(a.data - out_data)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def vjp(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (g2 * soft,)

    return _make(out_data, (a,), vjp, "logsumexp")


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root):
    order, stack, seen = [], [(root, False)], set()
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order  # parents before children


def backward(loss, accumulate=False):
    """Fill .grad for every reachable parameter of a scalar loss node.

    Gradient accumulators of reachable parameters are zeroed first unless
    ``accumulate`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        if node.requires_grad and not accumulate:
            node.grad = np.zeros_like(node.data)
    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            prev = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if prev is None else prev + pg


def grad_check(f, params, step=1e-3, sample=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic closure returning a scalar Tensor built from
    ``params``. When ``sample`` is given, only that many randomly chosen
    coordinates per parameter are probed (seeded via ``rng``); otherwise every
    coordinate is.
    """
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.size
        if sample is None or sample >= n:
            idxs = range(n)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(analytic[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# parameters and optimization


class ParameterStore:
    """Named trainable tensors plus the RNG used to initialize them."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params = {}

    def parameter(self, name, shape, init="fan_in"):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not isinstance(init, str):
            data = np.asarray(init, dtype=np.float64)
            if data.shape != tuple(shape):
                raise ShapeError(f"init shape {data.shape} != {tuple(shape)}")
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "fan_in":
            # symmetric uniform scaled by fan-in (first axis)
            bound = 1.0 / math.sqrt(shape[0])
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        t.op = f"param:{name}"
        self.params[name] = t
        return t

    def values(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, v in self.params.items():
            v.data = np.asarray(state[k], dtype=np.float64).reshape(v.data.shape)


class Adam:
    """Adaptive-moment gradient descent (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
