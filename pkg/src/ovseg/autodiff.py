"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor records its parents and a VJP closure; backward() walks the tape in
reverse topological order and accumulates ndarray grads. Only the ops the
segmentation pipeline needs are implemented. Convolution lowering and bilinear
resampling run through ovseg.kernels so they pick up the numba backend.
"""

import numpy as np

from . import kernels
from .errors import ShapeError


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- backward ------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    # python scalars follow the tensor operand's dtype (avoids f32->f64 creep)
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data
    return Tensor(out, parents=(a, b), vjp=lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data
    return Tensor(out, parents=(a, b), vjp=lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def power(a, k):
    a = as_tensor(a)
    k = float(k)
    out = a.data ** k
    if k == 0.0:
        vjp = lambda g: (np.zeros_like(a.data),)
    else:
        vjp = lambda g: (g * k * a.data ** (k - 1.0),)
    return Tensor(out, parents=(a,), vjp=vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), parents=(a,), vjp=lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * 0.5 / out,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out * (1.0 - out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """tanh-approximation GELU as one fused node (hot path in every MLP/conv)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        # d/dx [0.5 x (1 + tanh(u))], u = c (x + 0.044715 x^3)
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return Tensor(out, parents=(a,), vjp=vjp)


def clamp(a, lo, hi):
    """Clip values; gradient passes only where lo <= x <= hi."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _restore_axes(g, axis, keepdims, shape):
    if axis is None or keepdims:
        return np.broadcast_to(g, shape) if g.shape != shape else g
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    return Tensor(out, parents=(a,), vjp=lambda g: (
        np.ascontiguousarray(_restore_axes(g, axis, keepdims, shape)),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / out.size
    shape = a.data.shape
    return Tensor(out, parents=(a,), vjp=lambda g: (
        np.ascontiguousarray(_restore_axes(g, axis, keepdims, shape)) / n,))


def softmax(a, axis=-1):
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)  # constant shift, no grad
    e = exp(add(a, -shift))
    return mul(e, power(sum_(e, axis=axis, keepdims=True), -1.0))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return Tensor(a.data.reshape(shape), parents=(a,),
                  vjp=lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return Tensor(np.ascontiguousarray(a.data.transpose(axes)), parents=(a,),
                  vjp=lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(tensors), vjp=vjp)


def take(a, idx):
    """Indexing/gather; backward scatter-adds into the input shape."""
    a = as_tensor(a)
    out = a.data[idx]
    shape = a.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(np.ascontiguousarray(out), parents=(a,), vjp=vjp)


def pad2d(a, pad_h, pad_w):
    """Zero-pad the last two axes by (before, after) tuples."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.data.ndim - 2) + [tuple(pad_h), tuple(pad_w)]
    out = np.pad(a.data, width)
    sl = tuple([slice(None)] * (a.data.ndim - 2)
               + [slice(pad_h[0], out.shape[-2] - pad_h[1]),
                  slice(pad_w[0], out.shape[-1] - pad_w[1])])
    return Tensor(out, parents=(a,), vjp=lambda g: (np.ascontiguousarray(g[sl]),))


def roll(a, shift, axis):
    a = as_tensor(a)
    out = np.roll(a.data, shift, axis=axis)
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return Tensor(out, parents=(a,), vjp=lambda g: (np.roll(g, neg, axis=axis),))


# ---------------------------------------------------------------------------
# linear algebra / structured ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return Tensor(out, parents=(a, b), vjp=vjp)


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution via im2col; x (B,C,H,W), w (OC,C,kh,kw), b (OC,)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.data.shape
    OC, IC, kh, kw = w.data.shape
    if IC != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel expects {IC}")
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, pad)
    wm = w.data.reshape(OC, -1)
    out = np.matmul(wm, cols).reshape(B, OC, OH, OW)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, OC, 1, 1)
        parents.append(b)

    def vjp(g):
        gm = g.reshape(B, OC, OH * OW)
        gw = np.matmul(gm, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(wm.T, gm)
        gx = kernels.col2im(np.ascontiguousarray(gcols), B, C, H, W, kh, kw, stride, pad)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor(out, parents=tuple(parents), vjp=vjp)


def conv_transpose2d(x, w, b=None):
    """Transposed conv, kernel 2x2 stride 2; x (B,C,H,W), w (C,OC,2,2)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.data.shape
    IC, OC, kh, kw = w.data.shape
    if IC != C or (kh, kw) != (2, 2):
        raise ShapeError(f"conv_transpose2d expects (C,OC,2,2) kernel on C-channel input, "
                         f"got kernel {w.data.shape} for input channels {C}")
    t = np.tensordot(x.data, w.data, axes=([1], [0]))    # (B,H,W,OC,2,2)
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(B, OC, 2 * H, 2 * W)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, OC, 1, 1)
        parents.append(b)

    def vjp(g):
        gt = g.reshape(B, OC, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5)  # (B,H,W,OC,2,2)
        gx = np.tensordot(gt, w.data, axes=([3, 4, 5], [1, 2, 3]))     # (B,H,W,C)
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        gw = np.tensordot(x.data, gt, axes=([0, 2, 3], [0, 1, 2]))     # (C,OC,2,2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor(np.ascontiguousarray(out), parents=tuple(parents), vjp=vjp)


def bilinear_resize(x, oh, ow):
    """Bilinear resize of (B,C,H,W) (or (C,H,W)) to spatial (oh,ow)."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    data = x.data[None] if squeeze else x.data
    B, C, H, W = data.shape
    out = kernels.bilinear_resize(np.ascontiguousarray(data), oh, ow)

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = kernels.bilinear_resize_grad(np.ascontiguousarray(g4), H, W)
        return (gx[0] if squeeze else gx,)

    return Tensor(out[0] if squeeze else out, parents=(x,), vjp=vjp)


# ---------------------------------------------------------------------------
# verification helper
# ---------------------------------------------------------------------------

def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at ndarray x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g
