"""Upsampling decoder: 1/16-scale correlation features to full-resolution logits.

Two transposed-conv stages double the grid, each fusing an upsampled prior tap
by channel concat + conv; a final conv squeezes to one channel per class and a
bilinear 4x recovers the input resolution. Classes ride the batch axis, so all
kernels are shared across classes and the decoder stays permutation-equivariant.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .nn import Conv2d, ConvTranspose2x, Module


@dataclass
class SegResult:
    """Per-pixel class decision plus per-class probability maps."""

    labels: np.ndarray        # (H, W) int64, argmax over classes (ties -> lowest index)
    probs: np.ndarray         # (N, H, W) sigmoid probabilities


class UpsamplingDecoder(Module):
    def __init__(self, rng, corr_channels=32, guidance_channels=64):
        super().__init__()
        mid = max(corr_channels // 2, 1)
        self.up1 = ConvTranspose2x(rng, corr_channels, corr_channels)
        self.fuse1 = Conv2d(rng, corr_channels + guidance_channels, corr_channels, k=3)
        self.up2 = ConvTranspose2x(rng, corr_channels, mid)
        self.fuse2 = Conv2d(rng, mid + guidance_channels, mid, k=3)
        self.head = Conv2d(rng, mid, 1, k=3)

    def _fuse(self, x, guidance, conv, factor):
        n = x.shape[0]
        _, h2, w2 = guidance.shape[0], x.shape[2], x.shape[3]
        g = ad.bilinear_resize(guidance, h2, w2) if guidance.shape[1:] != (h2, w2) \
            else ad.as_tensor(guidance)
        g = g.reshape(1, *g.shape)
        tiled = ad.concat([g] * n, axis=0) if n > 1 else g
        return ad.gelu(conv(ad.concat([x, tiled], axis=1)))

    def __call__(self, corr, guidance, image_hw):
        corr = ad.as_tensor(corr)
        n, cc, h, w = corr.shape
        ih, iw = image_hw
        if (h * 16, w * 16) != (ih, iw):
            raise ShapeError(
                f"correlation grid {(h, w)} is not 1/16 of image {(ih, iw)}")
        if guidance.grid != (h, w):
            raise ShapeError(
                f"guidance grid {guidance.grid} does not match correlation grid {(h, w)}")
        x = self.up1(corr)                               # (N, Cc, 2H, 2W)
        x = self._fuse(x, guidance.shallow, self.fuse1, 2)
        x = self.up2(x)                                  # (N, mid, 4H, 4W)
        x = self._fuse(x, guidance.mid, self.fuse2, 4)
        x = self.head(x)                                 # (N, 1, 4H, 4W)
        logits = ad.bilinear_resize(x, ih, iw)
        return logits.reshape(n, ih, iw)


def predict(logits):
    """Argmax labels (ties break to the lowest class index) + sigmoid probabilities."""
    data = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    if not np.all(np.isfinite(data)):
        raise ValueError("logits contain non-finite values")
    labels = np.argmax(data, axis=0).astype(np.int64)
    probs = 1.0 / (1.0 + np.exp(-data))
    return SegResult(labels=labels, probs=probs)
