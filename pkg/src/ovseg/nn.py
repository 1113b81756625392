"""Small layer library on top of the autodiff tape.

Modules register parameters and children in insertion order, which fixes both
the checkpoint manifest order and the optimizer group assignment. All init is
drawn from an explicit numpy Generator so a single run seed reproduces every
weight.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_params(self):
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays, strict=True):
        own = dict(self.named_parameters())
        for name, arr in arrays.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            p = own[name]
            if tuple(p.data.shape) != tuple(arr.shape):
                raise ValueError(
                    f"shape mismatch for {name}: model {p.data.shape}, file {arr.shape}")
            p.data = np.asarray(arr, dtype=p.data.dtype)
        missing = set(own) - set(arrays)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")


def _uniform_fan(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, bias=True):
        super().__init__()
        self.w = Parameter(_uniform_fan(rng, (in_dim, out_dim), in_dim))
        self.b = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out


class Conv2d(Module):
    """Stride-1 same/valid conv; weight (OC, IC, k, k)."""

    def __init__(self, rng, in_ch, out_ch, k, stride=1, pad=None, bias=True):
        super().__init__()
        self.stride = stride
        self.pad = (k // 2 if stride == 1 else 0) if pad is None else pad
        self.w = Parameter(_uniform_fan(rng, (out_ch, in_ch, k, k), in_ch * k * k))
        self.b = Parameter(np.zeros(out_ch)) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2x(Module):
    """Transposed conv, kernel 2, stride 2 (doubles H and W)."""

    def __init__(self, rng, in_ch, out_ch):
        super().__init__()
        self.w = Parameter(_uniform_fan(rng, (in_ch, out_ch, 2, 2), in_ch * 4))
        self.b = Parameter(np.zeros(out_ch))

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.g = Parameter(np.ones(dim))
        self.b = Parameter(np.zeros(dim))

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xn = xc * ad.power(var + self.eps, -0.5)
        return xn * self.g + self.b


class Mlp(Module):
    def __init__(self, rng, dim, hidden, out=None):
        super().__init__()
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, out or dim)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Full self-attention over (..., T, C) token sequences."""

    def __init__(self, rng, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads {heads} must divide width {dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x, attn_bias=None):
        """x: (B, T, C); attn_bias broadcastable to (B, heads, T, T), additive."""
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, self.head_dim)
        qkv = qkv.transpose(2, 0, 3, 1, 4)          # (3, B, h, T, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * self.scale
        if attn_bias is not None:
            scores = scores + attn_bias
        attn = ad.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, C)
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm attention + MLP block."""

    def __init__(self, rng, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def sincos_position_embed(h, w, dim, dtype=np.float64):
    """Fixed 2-D sin/cos position table (h*w, dim); resolution-agnostic."""
    if dim % 4:
        raise ValueError(f"position embedding width {dim} must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))
    rows = np.arange(h)[:, None] * freqs[None, :]
    cols = np.arange(w)[:, None] * freqs[None, :]
    row_part = np.concatenate([np.sin(rows), np.cos(rows)], axis=1)    # (h, dim/2)
    col_part = np.concatenate([np.sin(cols), np.cos(cols)], axis=1)    # (w, dim/2)
    table = np.concatenate(
        [np.repeat(row_part, w, axis=0), np.tile(col_part, (h, 1))], axis=1)
    return table.astype(dtype)
