"""Parameter containers and the handful of layers the models need."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("trainable",)

    def __init__(self, data, name=None, trainable=True, dtype=None):
        super().__init__(data, requires_grad=trainable, name=name, dtype=dtype)
        self.trainable = bool(trainable)

    def freeze(self):
        self.trainable = False
        self.requires_grad = False
        self.grad = None

    def unfreeze(self):
        self.trainable = True
        self.requires_grad = True
        self.grad = np.zeros_like(self.data)


def trunc_normal(rng, shape, std=0.02, dtype=np.float64):
    """Normal(0, std) samples redrawn until they fall within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Base class: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True, std=0.02, dtype=np.float64):
        self.weight = Parameter(trunc_normal(rng, (n_in, n_out), std, dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3, std=None, dtype=np.float64):
        if std is None:
            # He-style scale keeps activations alive through the relu stack.
            std = float(np.sqrt(2.0 / (c_in * k * k)))
        self.weight = Parameter(trunc_normal(rng, (c_out, c_in, k, k), std, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64):
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return T.layernorm(x, axis=-1) * self.weight + self.bias


class Attention(Module):
    def __init__(self, rng, dim, heads, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(rng, dim, 3 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)

    def forward(self, x):
        n, d = x.shape
        h = self.heads
        hd = d // h
        qkv = self.qkv(x).reshape(n, 3, h, hd).transpose(1, 2, 0, 3)  # (3, h, n, hd)
        q = T.take(qkv, [0], axis=0).reshape(h, n, hd)
        k = T.take(qkv, [1], axis=0).reshape(h, n, hd)
        v = T.take(qkv, [2], axis=0).reshape(h, n, hd)
        att = T.softmax(T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(hd)), axis=-1)
        out = T.matmul(att, v).transpose(1, 0, 2).reshape(n, d)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer block over a (tokens, dim) sequence."""

    def __init__(self, rng, dim, heads, mlp_ratio=2, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(rng, dim, heads, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(rng, dim, int(dim * mlp_ratio), dtype=dtype)
        self.fc2 = Linear(rng, int(dim * mlp_ratio), dim, dtype=dtype)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))
