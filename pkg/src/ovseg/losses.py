"""Focal and dice objectives over per-class probability maps.

Both losses treat each class channel as an independent binary problem against
a one-hot target map and average over channels (and any batch axis). The
combined objective is focal + lam * dice; gamma=0, lam=0 reduces it to plain
binary cross-entropy, which is how the BCE ablation is expressed.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

PROB_CLAMP = 1e-7   # logs are undefined at exactly 0/1


def _prep(pred, target):
    pred = ad.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target,
                        dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.ndim < 2:
        raise ShapeError("losses expect at least (H, W) maps")
    return pred, target


def focal_loss(pred, target, gamma=2.0):
    """Hard-example-weighted binary loss, averaged per pixel then per channel.

    Fused into one graph node: the per-element term and its derivative are
    computed directly (this runs at full image resolution every step).
    """
    pred, y = _prep(pred, target)
    gamma = float(gamma)
    p = np.clip(pred.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = 1.0 - p
    logp, logq = np.log(p), np.log(q)
    term = q ** gamma * y * logp + p ** gamma * (1.0 - y) * logq
    out = -term.mean()

    def vjp(g):
        inside = (pred.data >= PROB_CLAMP) & (pred.data <= 1.0 - PROB_CLAMP)
        if gamma == 0.0:
            d = y / p - (1.0 - y) / q
        else:
            d = (y * (q ** gamma / p - gamma * q ** (gamma - 1.0) * logp)
                 + (1.0 - y) * (gamma * p ** (gamma - 1.0) * logq - p ** gamma / q))
        return (g * (-d * inside) / term.size,)

    return ad.Tensor(np.asarray(out), parents=(pred,), vjp=vjp)


def dice_loss(pred, target, eps=1e-6):
    """Soft-overlap loss in [0, 1]; eps keeps empty masks defined."""
    pred, y = _prep(pred, target)
    axes = (-2, -1)
    inter = (pred * y).sum(axis=axes)
    total = pred.sum(axis=axes) + Tensor(y.sum(axis=axes))
    score = (2.0 * inter + eps) * ad.power(total + eps, -1.0)
    return (1.0 - score).mean()


def combined_loss(pred, target, config):
    """focal + lam * dice with parameters from a LossConfig."""
    f = focal_loss(pred, target, config.gamma)
    if config.lam == 0.0:
        return f
    return f + config.lam * dice_loss(pred, target, config.dice_eps)


def one_hot_targets(mask, n_classes, dtype=np.float64):
    """(H, W) int mask -> (N, H, W) one-hot float maps."""
    mask = np.asarray(mask)
    out = np.zeros((n_classes, *mask.shape), dtype=dtype)
    for c in range(n_classes):
        out[c] = mask == c
    return out
