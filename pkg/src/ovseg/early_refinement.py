"""Windowed cross-attention cleanup of dense visual features.

Queries come from a small convolutional image encoder, keys from a learned sum
of that encoder's features and the dense features, and values are exactly the
original dense features. Per-head attention distributions are averaged into a
single weight set per location, so every output vector is a convex combination
of the original feature vectors inside its window — the refined map stays in
the backbone's feature space.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Linear, Module


def rope_tables(rows, cols, dim, base=10000.0, dtype=np.float64):
    """Per-token cos/sin tables, channels split half row / half column."""
    if dim % 2:
        raise ConfigError(f"rotary encoding needs an even channel count, got {dim}")
    if dim % 4:
        raise ConfigError(
            f"rotary encoding splits channels across two axes in rotation pairs; "
            f"width {dim} must be divisible by 4")
    half = dim // 2
    n_pairs = half // 2
    freqs = base ** (-2.0 * np.arange(n_pairs) / half)
    cos_parts, sin_parts = [], []
    for pos in (np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64)):
        ang = pos[..., None] * freqs          # (..., n_pairs)
        cos_parts.append(np.repeat(np.cos(ang), 2, axis=-1))
        sin_parts.append(np.repeat(np.sin(ang), 2, axis=-1))
    cos = np.concatenate(cos_parts, axis=-1).astype(dtype)
    sin = np.concatenate(sin_parts, axis=-1).astype(dtype)
    return cos, sin


def _rotate_pairs(x):
    # (x0, x1) -> (-x1, x0) per channel pair
    shape = x.shape
    x2 = x.reshape(*shape[:-1], shape[-1] // 2, 2)
    even = x2[(Ellipsis, slice(0, 1))]
    odd = x2[(Ellipsis, slice(1, 2))]
    rot = ad.concat([-odd, even], axis=-1)
    return rot.reshape(*shape)


def rope_rotate(x, rows, cols, base=10000.0):
    """Rotate token channels by position-dependent angles; x (..., T, D)."""
    x = ad.as_tensor(x)
    cos, sin = rope_tables(rows, cols, x.shape[-1], base, x.dtype)
    return x * cos + _rotate_pairs(x) * sin


def rope_apply(features, positions=None, base=10000.0):
    """Rotary encoding of a (C, H, W) feature map at integer grid positions.

    positions: (H, W, 2) integer (row, col) coordinates; defaults to the
    natural grid. Norms are preserved and attention scores between rotated
    vectors depend only on relative offsets.
    """
    features = ad.as_tensor(features)
    c, h, w = features.shape
    if positions is None:
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        positions = np.stack([rr, cc], axis=-1)
    positions = np.asarray(positions)
    tokens = features.transpose(1, 2, 0).reshape(h * w, c)
    out = rope_rotate(tokens, positions[..., 0].reshape(-1),
                      positions[..., 1].reshape(-1), base)
    return out.reshape(h, w, c).transpose(2, 0, 1)


def window_partition(h, w, win):
    """Non-overlapping windows with extents clamped at the borders.

    Returns groups {(wh, ww): int array (G, wh*ww)} of flat position ids;
    every position appears in exactly one window.
    """
    row_ranges = [(s, min(s + win, h)) for s in range(0, h, win)]
    col_ranges = [(s, min(s + win, w)) for s in range(0, w, win)]
    groups = {}
    for r0, r1 in row_ranges:
        for c0, c1 in col_ranges:
            rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
            idx = (rr * w + cc).reshape(-1)
            groups.setdefault((r1 - r0, c1 - c0), []).append(idx)
    return {shape: np.stack(rows) for shape, rows in groups.items()}


class EarlyRefiner(Module):
    """AnyUp-style anchored refinement; output grid equals the input grid."""

    def __init__(self, rng, channels=64, patch=16, window=3, heads=2):
        super().__init__()
        if patch % 2:
            raise ConfigError("early refiner conv encoder needs an even patch size")
        if channels % heads:
            raise ConfigError(f"refine heads {heads} must divide channels {channels}")
        if (channels // heads) % 4:
            raise ConfigError("refine head width must be divisible by 4 for rotary pairs")
        if window < 1:
            raise ConfigError("refine window must be >= 1")
        self.channels = channels
        self.patch = patch
        self.window = window
        self.heads = heads
        self.head_dim = channels // heads
        half = max(patch // 2, 1)
        self.conv1 = Conv2d(rng, 3, channels, k=half, stride=half, pad=0)
        self.conv2 = Conv2d(rng, channels, channels, k=2, stride=2, pad=0)
        self.q_proj = Linear(rng, channels, channels)
        self.k_guide = Linear(rng, channels, channels)   # key part from conv features
        self.k_value = Linear(rng, channels, channels)   # key part from dense features

    def encode_image(self, image):
        x = ad.as_tensor(image)
        x = x.reshape(1, *x.shape)
        x = ad.gelu(self.conv1(x))
        x = self.conv2(x)
        return x.reshape(*x.shape[1:])                   # (C, H, W)

    def __call__(self, image, features, return_weights=False):
        features = ad.as_tensor(features)
        guide = self.encode_image(image)
        c, h, w = features.shape
        if guide.shape != (self.channels, h, w):
            raise ShapeError(
                f"conv-encoder grid {guide.shape[1:]} does not match feature grid {(h, w)}")

        values = features.transpose(1, 2, 0).reshape(h * w, c)
        guide_t = guide.transpose(1, 2, 0).reshape(h * w, self.channels)
        q = self.q_proj(guide_t)
        k = self.k_guide(guide_t) + self.k_value(values)

        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        rows, cols = rr.reshape(-1), cc.reshape(-1)
        nh, hd = self.heads, self.head_dim
        q = rope_rotate(q.reshape(h * w, nh, hd), rows[:, None], cols[:, None])
        k = rope_rotate(k.reshape(h * w, nh, hd), rows[:, None], cols[:, None])

        groups = window_partition(h, w, self.window)
        scale = hd ** -0.5
        chunks, order, weight_log = [], [], []
        for idx in groups.values():
            qg = q[idx].transpose(0, 2, 1, 3)            # (G, nh, S, hd)
            kg = k[idx].transpose(0, 2, 1, 3)
            scores = (qg @ kg.transpose(0, 1, 3, 2)) * scale
            attn = ad.softmax(scores, axis=-1).mean(axis=1)   # (G, S, S) convex
            vg = values[idx]                             # (G, S, C)
            chunks.append((attn @ vg).reshape(-1, c))
            order.append(idx.reshape(-1))
            weight_log.append((idx, attn.data))
        order = np.concatenate(order)
        inverse = np.argsort(order)
        out = ad.concat(chunks, axis=0)[inverse]
        refined = out.reshape(h, w, c).transpose(2, 0, 1)
        if return_weights:
            return refined, weight_log
        return refined
