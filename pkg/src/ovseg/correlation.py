"""Per-class cosine similarity volumes and their projection to correlation features.

Similarities are computed against both text embeddings; the two N-channel
stacks are concatenated and mixed by a 1x1 conv shared across classes. With
the text ensemble disabled the local similarities fill both input channels,
reproducing the local-only baseline.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import Conv2d, Module

COSINE_NORM_FLOOR = 1e-12


def _unit(x, axis):
    norm = ad.sqrt((x * x).sum(axis=axis, keepdims=True))
    return x * ad.power(ad.clamp(norm, COSINE_NORM_FLOOR, np.inf), -1.0)


def cosine_volumes(features, texts):
    """Cosine of every feature vector against each class embedding.

    features: (C, H, W); returns (sim_global, sim_local), each (N, H, W) in
    [-1, 1]. Near-zero vectors are guarded by a norm floor, so degenerate
    inputs yield 0 rather than NaN.
    """
    features = ad.as_tensor(features)
    c, h, w = features.shape
    if texts.width != c:
        raise ShapeError(
            f"feature channels {c} do not match text embedding width {texts.width}")
    flat = _unit(features.reshape(c, h * w).transpose(1, 0), axis=1)   # (HW, C)
    sim = []
    for vecs in (texts.global_vecs, texts.local_vecs):
        t = _unit(vecs, axis=1)                                        # (N, C)
        s = (flat @ t.transpose(1, 0)).transpose(1, 0)                 # (N, HW)
        sim.append(s.reshape(texts.n_classes, h, w))
    return sim[0], sim[1]


class CorrelationProjector(Module):
    """1x1 conv from the stacked similarity pair to correlation features."""

    def __init__(self, rng, corr_channels=32):
        super().__init__()
        self.corr_channels = corr_channels
        self.proj = Conv2d(rng, 2, corr_channels, k=1)

    def __call__(self, sim_global, sim_local, text_ensemble=True):
        sg, sl = ad.as_tensor(sim_global), ad.as_tensor(sim_local)
        if sg.shape != sl.shape:
            raise ShapeError(f"similarity volumes differ: {sg.shape} vs {sl.shape}")
        first = sg if text_ensemble else sl
        n, h, w = sl.shape
        stacked = ad.concat([first.reshape(n, 1, h, w), sl.reshape(n, 1, h, w)],
                            axis=1)                                    # (N, 2, H, W)
        return self.proj(stacked)                                      # (N, Cc, H, W)
