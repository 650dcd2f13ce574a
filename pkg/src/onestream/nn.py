"""Small layer library on top of the tensor core.

Modules register children and parameters in order; parameter name paths
("backbone.block0.qkv.weight") double as checkpoint keys.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, param):
        param.name = name
        self._params[name] = param
        return param

    def add_module(self, name, module):
        self._children[name] = module
        return module

    def __getattr__(self, name):
        params = self.__dict__.get("_params", {})
        if name in params:
            return params[name]
        children = self.__dict__.get("_children", {})
        if name in children:
            return children[name]
        raise AttributeError(name)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name if prefix else name), p
        for name, child in self._children.items():
            sub = prefix + name + "." if prefix else name + "."
            yield from child.named_parameters(sub)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def bind_names(self, prefix=""):
        """Assign full name paths to every parameter (checkpoint keys)."""
        names = set()
        for name, p in self.named_parameters(prefix):
            p.name = name
            if name in names:
                raise ValueError(f"duplicate parameter name {name!r}")
            names.add(name)
        return self

    def state_dict(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix=""):
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            value = np.asarray(state[name])
            if tuple(value.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {value.shape}, "
                    f"model {tuple(p.data.shape)}"
                )
            p.data = value
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng):
        super().__init__()
        self.add_param("weight", Parameter(_uniform(rng, (in_dim, out_dim), in_dim)))
        self.add_param("bias", Parameter(_uniform(rng, (out_dim,), in_dim)))

    def forward(self, x):
        return T.linear(x, self.weight.tensor, self.bias.tensor)


class LayerNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.add_param("gamma", Parameter(np.ones(dim)))
        self.add_param("beta", Parameter(np.zeros(dim)))

    def forward(self, x):
        return T.layer_norm(x, self.gamma.tensor, self.beta.tensor)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=None):
        super().__init__()
        fan_in = kernel * kernel * in_ch
        self.stride = stride
        self.padding = padding
        self.add_param("weight", Parameter(_uniform(rng, (kernel, kernel, in_ch, out_ch), fan_in)))
        self.add_param("bias", Parameter(_uniform(rng, (out_ch,), fan_in)))

    def forward(self, x):
        return T.conv2d(x, self.weight.tensor, self.bias.tensor,
                        stride=self.stride, padding=self.padding)


class Deconv2d(Module):
    def __init__(self, in_ch, out_ch, rng, stride=2):
        super().__init__()
        fan_in = stride * stride * in_ch
        self.stride = stride
        self.add_param("weight", Parameter(_uniform(rng, (stride, stride, in_ch, out_ch), fan_in)))
        self.add_param("bias", Parameter(_uniform(rng, (out_ch,), fan_in)))

    def forward(self, x):
        return T.deconv2d(x, self.weight.tensor, self.bias.tensor, stride=self.stride)


class PointMLP(Module):
    """Shared per-point MLP: linear layers with ReLU between (none after)."""

    def __init__(self, widths, rng):
        super().__init__()
        self.depth = len(widths) - 1
        for i in range(self.depth):
            self.add_module(f"l{i + 1}", Linear(widths[i], widths[i + 1], rng))

    def forward(self, x):
        for i in range(self.depth):
            x = self._children[f"l{i + 1}"](x)
            if i < self.depth - 1:
                x = T.relu(x)
        return x


class TransformerBlock(Module):
    """Pre-norm block: LN -> fused QKV attention -> residual -> LN -> MLP -> residual."""

    def __init__(self, dim, heads, rng, hidden=None):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        hidden = hidden or 4 * dim
        self.add_module("norm1", LayerNorm(dim))
        self.add_module("qkv", Linear(dim, 3 * dim, rng))
        self.add_module("proj", Linear(dim, dim, rng))
        self.add_module("norm2", LayerNorm(dim))
        self.add_module("fc1", Linear(dim, hidden, rng))
        self.add_module("fc2", Linear(hidden, dim, rng))

    def attention(self, x):
        """Multi-head self-attention over normalized tokens.

        Returns (output tokens, row-stochastic attention of shape
        (heads, N, N)).
        """
        n = x.shape[0]
        qkv = self.qkv(self.norm1(x))
        q, k, v = T.split(qkv, 3, axis=1)
        q = T.transpose(T.reshape(q, (n, self.heads, self.head_dim)), (1, 0, 2))
        k = T.transpose(T.reshape(k, (n, self.heads, self.head_dim)), (1, 0, 2))
        v = T.transpose(T.reshape(v, (n, self.heads, self.head_dim)), (1, 0, 2))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.head_dim))
        attn = T.softmax_rows(scores)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (1, 0, 2)), (n, self.dim))
        return self.proj(out), attn

    def forward(self, x, want_attention=False):
        att_out, attn = self.attention(x)
        x = T.add(x, att_out)
        x = T.add(x, self.fc2(T.relu(self.fc1(self.norm2(x)))))
        return (x, attn.data.copy()) if want_attention else (x, None)
