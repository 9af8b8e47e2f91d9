"""Parameters and the layer building blocks used by the network."""
import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name used for checkpointing."""

    def __init__(self, data, name="", requires_grad=True):
        super().__init__(np.array(data), requires_grad=requires_grad)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class Module:
    """Minimal container: parameters are discovered from attributes."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def assign_names(self):
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True):
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, dtype=np.float32):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        if eps <= 0:
            raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def multi_head_self_attention(z, heads, wq, wk, wv, wo, return_attention=False):
    """Scaled dot-product self-attention over tokens ``z`` of shape (..., l, d).

    ``wq``/``wk``/``wv``/``wo`` are ``Linear`` layers (d -> d). Per head of
    width d/heads: softmax(Q K^T / sqrt(d/heads)) V; heads are concatenated
    and mixed by ``wo``.
    """
    d = z.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"embedding width {d} is not divisible by {heads} heads")
    dh = d // heads
    lead = z.shape[:-2]
    l = z.shape[-2]

    def split(t):
        # (..., l, d) -> (..., heads, l, dh)
        t = T.reshape(t, lead + (l, heads, dh))
        n = len(lead)
        return T.transpose(t, tuple(range(n)) + (n + 1, n, n + 2))

    q, k, v = split(wq(z)), split(wk(z)), split(wv(z))
    n = len(lead)
    kt = T.transpose(k, tuple(range(n + 1)) + (n + 2, n + 1))
    scores = T.mul(T.matmul(q, kt), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.transpose(ctx, tuple(range(n)) + (n + 1, n, n + 2))
    out = wo(T.reshape(ctx, lead + (l, d)))
    if return_attention:
        return out, attn.data
    return out


class MultiHeadSelfAttention(Module):
    def __init__(self, d, heads, rng, dtype=np.float32):
        if heads < 1 or d % heads:
            raise ConfigError(f"embedding width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def __call__(self, z, return_attention=False):
        return multi_head_self_attention(z, self.heads, self.q, self.k, self.v, self.o, return_attention)


class MLP(Module):
    def __init__(self, d, hidden, rng, dtype=np.float32):
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))
