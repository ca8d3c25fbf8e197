"""Parameterized building blocks on top of :mod:`splatsem.nn.autograd`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Container that registers Tensor parameters and child modules by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if k in params:
                if params[k].shape != np.shape(v):
                    raise ValueError(f"{k}: shape {np.shape(v)} != {params[k].shape}")
                params[k].data = np.array(v, dtype=params[k].dtype, copy=True)

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m):
        name = str(len(self._items))
        self._children[name] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def param(array) -> Tensor:
    return Tensor(array, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero_init=False, dtype=np.float64):
        super().__init__()
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))
        self.weight = param(w.astype(dtype))
        self.bias = param(np.zeros(n_out, dtype)) if bias else None

    def forward(self, x):
        y = ag.as_tensor(x) @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64, eps=1e-5):
        super().__init__()
        self.weight = param(np.ones(dim, dtype))
        self.bias = param(np.zeros(dim, dtype))
        self.eps = eps

    def forward(self, x):
        return ag.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Linear layers with GELU in between (none after the last)."""

    def __init__(self, dims, rng, zero_last=False, dtype=np.float64):
        super().__init__()
        self.layers = ModuleList(
            Linear(a, b, rng, zero_init=zero_last and i == len(dims) - 2, dtype=dtype)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])))

    def forward(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = ag.gelu(x)
        return x


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng, qkv_bias=True, dtype=np.float64):
        super().__init__()
        if dim % heads:
            raise ValueError(f"{heads} heads do not divide width {dim}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, x):
        n, dim = x.shape
        h = self.heads
        dh = dim // h
        qkv = self.qkv(x).reshape(n, 3, h, dh).transpose(1, 2, 0, 3)  # 3, h, n, dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ag.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        out = (att @ v).transpose(1, 0, 2).reshape(n, dim)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim, heads, rng, mlp_ratio=4, dtype=np.float64):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP([dim, int(dim * mlp_ratio), dim], rng, dtype=dtype)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
