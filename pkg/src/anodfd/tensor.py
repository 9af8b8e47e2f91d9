"""A small reverse-mode autodiff tensor over numpy arrays.

Every differentiable op records its parents and a closure mapping the output
gradient to per-parent gradients. ``Tensor.backward`` walks that tape in
reverse topological order, visiting each node once and summing the gradients
of repeated uses. Leaf tensors with ``requires_grad`` accumulate into
``.grad`` across calls; call ``zero_grad`` between optimizer steps.
"""
import math
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, UsageError

_grad_enabled = True


@contextmanager
def no_grad():
    """Run forward passes without recording the tape (inference, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """Populate ``.grad`` on every ``requires_grad`` leaf reachable from this scalar."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    g = g.astype(node.data.dtype, copy=False)
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _node(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def check_finite(x, what="tensor"):
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def absolute(x):
    def backward(g):
        return (g * np.sign(x.data),)

    return _node(np.abs(x.data), (x,), backward)


def relu(x):
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _node(out, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    u = x.data
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    out = 0.5 * u * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * dt),)

    return _node(out, (x,), backward)


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_all(x):
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean_all(x):
    n = x.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _node(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def reshape(x, shape):
    def backward(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), backward)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _node(x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=1):
    tensors = list(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of (B, C, H, W)."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        B, C, H, W = x.shape
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise ConfigError(f"linear: input width {x.shape[-1]} != weight rows {d_in}")
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (d_out,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        grads = ((g2 @ weight.data.T).reshape(x.shape), x2.T @ g2)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _node(out, parents, backward)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of (B, Cin, H, W) with (Cout, Cin, kh, kw) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, wc, kh, kw = weight.shape
    if wc != Cin:
        raise ConfigError(f"conv2d: input has {Cin} channels but weight expects {wc}")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}+{padding}")
    check_finite(x, "conv2d input")
    Ho = kernels.out_size(H, kh, stride, padding)
    Wo = kernels.out_size(W, kw, stride, padding)

    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(Cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = kernels.col2im(g2 @ wmat, x.shape, kh, kw, stride, padding) if x.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _node(out, parents, backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ConfigError(f"layer_norm: affine shape must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

BCE_CLAMP = 1e-7


def bce(pred, target):
    """Mean binary cross-entropy of probabilities ``pred`` against 0/1 ``target``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the gradient is zero where
    the clamp is active.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if y.shape != pred.shape:
        raise ConfigError(f"bce: prediction shape {pred.shape} != target shape {y.shape}")
    a = pred.data
    lo, hi = pred.dtype.type(BCE_CLAMP), pred.dtype.type(1.0 - BCE_CLAMP)
    ac = np.clip(a, lo, hi)
    a64, y64 = ac.astype(np.float64), y.astype(np.float64)
    per_pixel = -(y64 * np.log(a64) + (1.0 - y64) * np.log1p(-a64))
    loss = np.asarray(per_pixel.mean(), dtype=pred.dtype)
    n = a.size

    def backward(g):
        inside = (a >= lo) & (a <= hi)
        ga = (ac - y) / (ac * (1.0 - ac)) / n * inside
        return (g * ga.astype(pred.dtype),)

    return _node(loss, (pred,), backward)
