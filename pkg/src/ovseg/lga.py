"""Tiled local-global inference.

The input is resized to a square, cut into overlapping windows, each window
encoded separately, and the window features merged by per-cell averaging. The
merged map is averaged with the full-image features and fed to the head. Both
the dense encoder and the prior encoder can be toggled between tiled and
full-image operation; with both toggles off this reduces exactly to the plain
single-pass pipeline.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import predict
from .encoders import GuidancePyramid
from .errors import AlignmentError, ConfigError


@dataclass
class TilePlan:
    image_hw: tuple          # square resize target (H, W)
    window: int
    overlap: int
    stride: int
    origins: list            # row-major (row, col) tile corners

    @property
    def n_tiles(self):
        return len(self.origins)


def _axis_origins(size, window, stride):
    out = []
    pos = 0
    while True:
        out.append(min(pos, size - window))
        if pos + window >= size:
            break
        pos += stride
    return out


def plan_tiles(infer_cfg):
    """Overlapping window schedule over the resized square image."""
    size, window, overlap = infer_cfg.resize, infer_cfg.window, infer_cfg.overlap
    if overlap >= window:
        raise ConfigError(f"overlap {overlap} must be smaller than window {window}")
    if window > size:
        raise ConfigError(f"window {window} exceeds image size {size}")
    stride = window - overlap
    rows = _axis_origins(size, window, stride)
    cols = _axis_origins(size, window, stride)
    origins = [(r, c) for r in rows for c in cols]
    return TilePlan((size, size), window, overlap, stride, origins)


def merge_tiles(tile_features, plan, patch):
    """Average overlapping tile feature maps onto the full grid.

    tile_features: list of (origin (row, col) in pixels, (C, h, w) array).
    Every cell of the output grid is the arithmetic mean of the tile values
    covering it.
    """
    gh = plan.image_hw[0] // patch
    gw = plan.image_hw[1] // patch
    first = tile_features[0][1]
    c = (first.data if isinstance(first, Tensor) else first).shape[0]
    acc = np.zeros((c, gh, gw))
    cnt = np.zeros((1, gh, gw))
    for (row, col), feats in tile_features:
        if row % patch or col % patch:
            raise AlignmentError(
                f"tile origin {(row, col)} not divisible by patch {patch}")
        data = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
        r, c0 = row // patch, col // patch
        th, tw = data.shape[1], data.shape[2]
        acc[:, r:r + th, c0:c0 + tw] += data
        cnt[:, r:r + th, c0:c0 + tw] += 1.0
    if (cnt == 0).any():
        raise AlignmentError("tile plan leaves grid cells uncovered")
    return acc / cnt


def lga_features(image, vision_encoder, infer_cfg, patch):
    """Aggregated dense features: mean of merged tile features and global features."""
    _, global_feats = vision_encoder(image)
    if not infer_cfg.lga_vlm:
        return global_feats.data
    plan = plan_tiles(infer_cfg)
    tiles = []
    for (row, col) in plan.origins:
        crop = image[:, row:row + plan.window, col:col + plan.window]
        _, feats = vision_encoder(np.ascontiguousarray(crop))
        tiles.append(((row, col), feats.data))
    merged = merge_tiles(tiles, plan, patch)
    return 0.5 * (merged + global_feats.data)


def lga_guidance(image, prior_encoder, infer_cfg, patch):
    """Prior taps from the full image, or tiled-and-merged when lga_spe is on."""
    if not infer_cfg.lga_spe:
        return prior_encoder(image)
    plan = plan_tiles(infer_cfg)
    taps = {"shallow": [], "mid": [], "deep": []}
    for (row, col) in plan.origins:
        crop = np.ascontiguousarray(image[:, row:row + plan.window, col:col + plan.window])
        pyr = prior_encoder(crop)
        for key in taps:
            taps[key].append(((row, col), getattr(pyr, key).data))
    merged = {key: Tensor(merge_tiles(tiles, plan, patch))
              for key, tiles in taps.items()}
    return GuidancePyramid(**merged)


def resize_image(image, size):
    image = np.asarray(image, dtype=np.float64)
    if image.shape[1:] == (size, size):
        return image
    return ad.bilinear_resize(Tensor(image), size, size).data


def infer(image, model, class_names, infer_cfg, texts=None, trace=None):
    """Full tiled-inference pipeline; returns a SegResult at the resize target."""
    if texts is None:
        if not class_names:
            raise ValueError("class list is empty")
        texts = model.encode_texts(class_names)
    resized = resize_image(image, infer_cfg.resize)
    feats = lga_features(resized, model.vision, infer_cfg, model.config.patch)
    guidance = lga_guidance(resized, model.prior, infer_cfg, model.config.patch)
    if trace is not None:
        trace["tiled_vlm"] = infer_cfg.lga_vlm
        trace["tiled_spe"] = infer_cfg.lga_spe
    logits = model.head_forward(Tensor(resized), Tensor(feats), guidance, texts,
                                trace)
    return predict(logits)
