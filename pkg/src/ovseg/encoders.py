"""Deterministic, trainable stub backbones.

Three encoders stand in for the frozen foundation models: a toy ViT for dense
visual features plus a summary token, a hash-n-gram text encoder emitting a
(global, local) embedding pair per class prompt, and a multi-tap prior encoder
whose intermediate maps guide refinement and decoding. Everything is seeded,
pure, and small enough to finetune on a laptop.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import Linear, Module, Parameter, TransformerBlock, sincos_position_embed

PROMPT_TEMPLATE = "A photo of a {} in the scene"


def check_image(image, patch):
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError(f"image must be (3,H,W), got {data.shape}")
    _, h, w = data.shape
    if h % patch:
        raise ShapeError(f"image height {h} not divisible by patch size {patch}")
    if w % patch:
        raise ShapeError(f"image width {w} not divisible by patch size {patch}")
    return data


@dataclass
class TextEmbeddingSet:
    """Per-class text embeddings: the global/local pair plus their mean."""

    class_names: list
    global_vecs: Tensor     # (N, C), aligned with the image summary token
    local_vecs: Tensor      # (N, C), aligned with averaged patch features
    mean_vecs: Tensor = None

    def __post_init__(self):
        g, l = self.global_vecs.data, self.local_vecs.data
        if g.shape != l.shape or g.shape[0] != len(self.class_names):
            raise ShapeError(
                f"text embedding shapes {g.shape}/{l.shape} do not match "
                f"{len(self.class_names)} classes")
        if (np.linalg.norm(g, axis=1) < 1e-12).any() or (np.linalg.norm(l, axis=1) < 1e-12).any():
            raise ValueError("text embeddings contain a zero row")
        if self.mean_vecs is None:
            self.mean_vecs = (self.global_vecs + self.local_vecs) * 0.5

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def width(self):
        return self.global_vecs.data.shape[1]

    def permuted(self, order):
        idx = np.asarray(order)
        return TextEmbeddingSet(
            [self.class_names[i] for i in idx],
            Tensor(self.global_vecs.data[idx]),
            Tensor(self.local_vecs.data[idx]))

    def scaled(self, factors):
        f = np.asarray(factors)[:, None]
        return TextEmbeddingSet(
            list(self.class_names),
            Tensor(self.global_vecs.data * f),
            Tensor(self.local_vecs.data * f))


@dataclass
class GuidancePyramid:
    """Prior-encoder taps at three depths, all on the same spatial grid."""

    shallow: Tensor
    mid: Tensor
    deep: Tensor

    def __post_init__(self):
        shapes = {t.data.shape for t in (self.shallow, self.mid, self.deep)}
        if len(shapes) != 1:
            raise ShapeError(f"guidance taps must share one shape, got {shapes}")

    @property
    def grid(self):
        return self.shallow.data.shape[1:]


def _patchify(image, patch):
    """(3,H,W) Tensor -> (T, 3*patch*patch) token matrix."""
    _, h, w = image.shape
    gh, gw = h // patch, w // patch
    x = image.reshape(3, gh, patch, gw, patch)
    x = x.transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, 3 * patch * patch), gh, gw


class VisionEncoder(Module):
    """Patch embedding + a few transformer blocks; emits summary token and dense map.

    depth=0 with use_pos_embed=False degenerates to a pure linear patch embed,
    which is translation-invariant across aligned crops (used by the tiled
    inference equivalence tests).
    """

    def __init__(self, rng, channels=64, patch=16, depth=2, heads=4,
                 use_pos_embed=True):
        super().__init__()
        self.channels = channels
        self.patch = patch
        self.depth = depth
        self.use_pos_embed = use_pos_embed
        self.embed = Linear(rng, 3 * patch * patch, channels)
        self.cls_token = Parameter(rng.standard_normal(channels) * 0.02)
        self.blocks = _BlockList(rng, channels, heads, depth)

    def __call__(self, image):
        check_image(image, self.patch)
        image = ad.as_tensor(image)
        tokens, gh, gw = _patchify(image, self.patch)
        tokens = self.embed(tokens)                       # (T, C)
        if self.use_pos_embed:
            pos = sincos_position_embed(gh, gw, self.channels, tokens.dtype)
            tokens = tokens + pos
        seq = ad.concat([self.cls_token.reshape(1, -1), tokens], axis=0)
        seq = seq.reshape(1, gh * gw + 1, self.channels)
        for block in self.blocks:
            seq = block(seq)
        seq = seq.reshape(gh * gw + 1, self.channels)
        cls_vec = seq[np.array([0])].reshape(self.channels)
        feats = seq[np.arange(1, gh * gw + 1)]
        feats = feats.reshape(gh, gw, self.channels).transpose(2, 0, 1)
        return cls_vec, feats


class _BlockList(Module):
    def __init__(self, rng, dim, heads, depth):
        super().__init__()
        self.depth = depth
        for i in range(depth):
            setattr(self, f"block{i}", TransformerBlock(rng, dim, heads))

    def __iter__(self):
        return (getattr(self, f"block{i}") for i in range(self.depth))


class TextEncoder(Module):
    """Prompted hash-n-gram text encoder with two output heads.

    The n-gram featurizer is a pure function of the prompt string, so each
    class row is independent of batch composition; the dense layers are
    trainable. Output rows are L2-normalized.
    """

    def __init__(self, rng, channels=64, hash_dim=256):
        super().__init__()
        if hash_dim % 2:
            raise ValueError("text hash dim must be even (prompt half + name half)")
        self.channels = channels
        self.hash_dim = hash_dim
        self.trunk = Linear(rng, hash_dim, channels)
        self.head_global = Linear(rng, channels, channels)
        self.head_local = Linear(rng, channels, channels)

    @staticmethod
    def _ngram_counts(text, dim):
        counts = np.zeros(dim)
        text = text.lower()
        for n in (1, 2, 3):
            for i in range(len(text) - n + 1):
                bucket = zlib.crc32(text[i:i + n].encode("utf-8")) % dim
                counts[bucket] += 1.0
        return counts / max(np.linalg.norm(counts), 1e-12)

    def featurize(self, name):
        """Hash features: templated prompt in one half, bare name in the other.

        The shared template would otherwise dominate the n-gram mass and leave
        class embeddings nearly collinear; the name half keeps arbitrary class
        strings well separated.
        """
        half = self.hash_dim // 2
        prompt = PROMPT_TEMPLATE.format(name)
        return np.concatenate([self._ngram_counts(prompt, half),
                               self._ngram_counts(str(name), half)])

    def __call__(self, class_names):
        if not class_names:
            raise ValueError("class list is empty")
        if any(not str(name).strip() for name in class_names):
            raise ValueError("class names must be nonempty")
        feats = np.stack([self.featurize(name) for name in class_names])
        hidden = ad.gelu(self.trunk(Tensor(feats)))
        gvec = _unit_rows(self.head_global(hidden))
        lvec = _unit_rows(self.head_local(hidden))
        return TextEmbeddingSet(list(class_names), gvec, lvec)


def _unit_rows(x):
    norm = ad.sqrt((x * x).sum(axis=1, keepdims=True) + 1e-24)
    return x * ad.power(norm, -1.0)


class PriorEncoder(Module):
    """Auxiliary image encoder tapped at three depths (same grid, rising abstraction)."""

    def __init__(self, rng, channels=64, patch=16, depth=3, heads=4,
                 use_pos_embed=True):
        super().__init__()
        if depth < 3:
            raise ValueError("prior encoder needs depth >= 3 for three taps")
        self.channels = channels
        self.patch = patch
        self.use_pos_embed = use_pos_embed
        self.embed = Linear(rng, 3 * patch * patch, channels)
        self.blocks = _BlockList(rng, channels, heads, depth)
        # taps: first block, middle block, final block
        self.tap_ids = (0, depth // 2 if depth > 2 else 1, depth - 1)
        if len(set(self.tap_ids)) != 3:
            self.tap_ids = (0, 1, depth - 1)

    def __call__(self, image):
        check_image(image, self.patch)
        image = ad.as_tensor(image)
        tokens, gh, gw = _patchify(image, self.patch)
        tokens = self.embed(tokens)
        if self.use_pos_embed:
            pos = sincos_position_embed(gh, gw, self.channels, tokens.dtype)
            tokens = tokens + pos
        seq = tokens.reshape(1, gh * gw, self.channels)
        taps = []
        for i, block in enumerate(self.blocks):
            seq = block(seq)
            if i in self.tap_ids:
                fmap = seq.reshape(gh, gw, self.channels).transpose(2, 0, 1)
                taps.append(fmap)
        return GuidancePyramid(*taps)
