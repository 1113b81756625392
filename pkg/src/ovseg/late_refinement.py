"""Late refinement of correlation features.

Each stage runs a spatial block (window attention then shifted-window
attention over every class's map, guided by the projected deep prior tap) and
a class block (attention across the class axis at each location, guided by the
projected mean text embedding). The class axis carries no positional encoding,
so the whole stack is permutation-equivariant in the class set.
"""

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .nn import LayerNorm, Linear, Mlp, Module, MultiHeadAttention

NEG_INF = -1e9


def shifted_window_bias(h, w, win, shift, dtype=np.float64):
    """Additive (nW, 1, S, S) mask blocking attention across wrapped regions."""
    ids = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for r0, r1 in ((0, h - win), (h - win, h - shift), (h - shift, h)):
        for c0, c1 in ((0, w - win), (w - win, w - shift), (w - shift, w)):
            ids[r0:r1, c0:c1] = cnt
            cnt += 1
    idw = ids.reshape(h // win, win, w // win, win).transpose(0, 2, 1, 3)
    idw = idw.reshape(-1, win * win)                       # (nW, S)
    same = idw[:, :, None] == idw[:, None, :]
    bias = np.where(same, 0.0, NEG_INF).astype(dtype)
    return bias[:, None, :, :]


class _GuidedMlp(Module):
    """Two-layer projection of guidance features into the correlation width."""

    def __init__(self, rng, in_dim, out_dim):
        super().__init__()
        self.net = Mlp(rng, in_dim, out_dim, out_dim)

    def __call__(self, x):
        return self.net(x)


class SpatialRefineBlock(Module):
    """Per-class spatial attention: W-MSA sub-block then SW-MSA sub-block."""

    def __init__(self, rng, corr_channels, guidance_channels, window=4, heads=4):
        super().__init__()
        if window < 2:
            raise ShapeError(f"spatial window must be >= 2, got {window}")
        self.window = window
        self.shift = window // 2
        self.project_guidance = _GuidedMlp(rng, guidance_channels, corr_channels)
        self.norm_a1 = LayerNorm(corr_channels)
        self.attn_w = MultiHeadAttention(rng, corr_channels, heads)
        self.norm_m1 = LayerNorm(corr_channels)
        self.mlp1 = Mlp(rng, corr_channels, 2 * corr_channels)
        self.norm_a2 = LayerNorm(corr_channels)
        self.attn_sw = MultiHeadAttention(rng, corr_channels, heads)
        self.norm_m2 = LayerNorm(corr_channels)
        self.mlp2 = Mlp(rng, corr_channels, 2 * corr_channels)

    def _windowed(self, attn, x, n, h, w, shift):
        win = self.window
        c = x.shape[-1]
        if shift:
            x = ad.roll(x.reshape(n, h, w, c), (-shift, -shift), axis=(1, 2))
            x = x.reshape(n, h * w, c)
        nw = (h // win) * (w // win)
        xw = x.reshape(n, h // win, win, w // win, win, c)
        xw = xw.transpose(0, 1, 3, 2, 4, 5).reshape(n * nw, win * win, c)
        bias = None
        if shift:
            bias = np.tile(shifted_window_bias(h, w, win, shift, x.dtype), (n, 1, 1, 1))
        y = attn(xw, bias)
        y = y.reshape(n, h // win, w // win, win, win, c)
        y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, h * w, c)
        if shift:
            y = ad.roll(y.reshape(n, h, w, c), (shift, shift), axis=(1, 2))
            y = y.reshape(n, h * w, c)
        return y

    def _check(self, corr, guidance):
        n, cc, h, w = corr.shape
        if guidance.shape[1:] != (h, w):
            raise ShapeError(
                f"guidance grid {guidance.shape[1:]} does not match correlation grid {(h, w)}")
        if h % self.window or w % self.window:
            raise ShapeError(
                f"correlation grid {(h, w)} must be divisible by spatial window {self.window}")
        return n, cc, h, w

    def guidance_tokens(self, guidance, h, w):
        g = guidance.transpose(1, 2, 0).reshape(h * w, guidance.shape[0])
        return self.project_guidance(g).reshape(1, h * w, -1)

    def apply_wmsa(self, x, g, n, h, w):
        x = x + self._windowed(self.attn_w, self.norm_a1(x) + g, n, h, w, shift=0)
        return x + self.mlp1(self.norm_m1(x))

    def apply_swmsa(self, x, g, n, h, w):
        x = x + self._windowed(self.attn_sw, self.norm_a2(x) + g, n, h, w, shift=self.shift)
        return x + self.mlp2(self.norm_m2(x))

    def __call__(self, corr, deep_guidance):
        corr = ad.as_tensor(corr)
        deep_guidance = ad.as_tensor(deep_guidance)
        n, cc, h, w = self._check(corr.data, deep_guidance.data)
        g = self.guidance_tokens(deep_guidance, h, w)
        x = corr.transpose(0, 2, 3, 1).reshape(n, h * w, cc)
        x = self.apply_wmsa(x, g, n, h, w)
        x = self.apply_swmsa(x, g, n, h, w)
        return x.reshape(n, h, w, cc).transpose(0, 3, 1, 2)


class ClassRefineBlock(Module):
    """Attention across class tokens at each location, text-guided."""

    def __init__(self, rng, corr_channels, text_channels, heads=4):
        super().__init__()
        self.project_text = _GuidedMlp(rng, text_channels, corr_channels)
        self.norm_a = LayerNorm(corr_channels)
        self.attn = MultiHeadAttention(rng, corr_channels, heads)
        self.norm_m = LayerNorm(corr_channels)
        self.mlp = Mlp(rng, corr_channels, 2 * corr_channels)

    def text_guidance(self, texts):
        # normalized halves keep the guidance invariant to per-class rescaling
        g = _unit_rows(texts.global_vecs)
        l = _unit_rows(texts.local_vecs)
        return self.project_text((g + l) * 0.5)          # (N, Cc)

    def __call__(self, corr, texts):
        corr = ad.as_tensor(corr)
        n, cc, h, w = corr.shape
        if texts.n_classes != n:
            raise ShapeError(
                f"correlation has {n} classes but text set has {texts.n_classes}")
        g = self.text_guidance(texts).reshape(1, n, cc)
        x = corr.transpose(2, 3, 0, 1).reshape(h * w, n, cc)
        x = x + self.attn(self.norm_a(x) + g)
        x = x + self.mlp(self.norm_m(x))
        return x.reshape(h, w, n, cc).transpose(2, 3, 0, 1)


def _unit_rows(x):
    norm = ad.sqrt((x * x).sum(axis=1, keepdims=True) + 1e-24)
    return x * ad.power(norm, -1.0)


class LateRefineStack(Module):
    """N stages of (spatial refine -> class refine), unshared weights."""

    def __init__(self, rng, corr_channels, guidance_channels, text_channels,
                 stages=2, window=4, heads=4):
        super().__init__()
        self.stages = stages
        for i in range(stages):
            setattr(self, f"spatial{i}",
                    SpatialRefineBlock(rng, corr_channels, guidance_channels, window, heads))
            setattr(self, f"classref{i}",
                    ClassRefineBlock(rng, corr_channels, text_channels, heads))

    def stage(self, i):
        return getattr(self, f"spatial{i}"), getattr(self, f"classref{i}")

    def __call__(self, corr, guidance, texts):
        for i in range(self.stages):
            spatial, classref = self.stage(i)
            corr = spatial(corr, guidance.deep)
            corr = classref(corr, texts)
        return corr
