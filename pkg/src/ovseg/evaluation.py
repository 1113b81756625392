"""Metrics and analysis: mIoU with seen/unseen splits, similarity-based class
partitioning, ridge-regression predictability of visual prototypes, and
mask-pooled prototype extraction."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns prediction; ignore_label pixels skipped."""

    n_classes: int
    ignore_label: int = 255
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    def update(self, target, prediction):
        target = np.asarray(target)
        prediction = np.asarray(prediction)
        if target.shape != prediction.shape:
            raise ShapeError(
                f"target shape {target.shape} != prediction shape {prediction.shape}")
        gt = target.reshape(-1).astype(np.int64)
        pred = prediction.reshape(-1).astype(np.int64)
        valid = gt != self.ignore_label
        if (gt[valid] < 0).any() or (gt[valid] >= self.n_classes).any():
            raise ValueError("target labels out of range")
        if (pred[valid] < 0).any() or (pred[valid] >= self.n_classes).any():
            raise ValueError("prediction labels out of range")
        kernels.confusion_accumulate(self.counts, np.ascontiguousarray(gt),
                                     np.ascontiguousarray(pred), self.ignore_label)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    def per_class_iou(self):
        """IoU per class; NaN where the union is empty (class absent everywhere)."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - np.diag(self.counts)
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, tp / union, np.nan)
        return iou


def miou(predictions, targets, n_classes, ignore_label=255):
    """Mean IoU over classes with nonempty union, plus the per-class vector."""
    conf = ConfusionMatrix(n_classes, ignore_label)
    if not isinstance(predictions, (list, tuple)):
        predictions, targets = [predictions], [targets]
    for pred, tgt in zip(predictions, targets):
        conf.update(tgt, pred)
    iou = conf.per_class_iou()
    valid = ~np.isnan(iou)
    if not valid.any():
        raise UndefinedMetricError("every class is absent; mIoU undefined")
    return float(np.nanmean(iou)), iou


@dataclass
class ClassPartition:
    seen: set
    unseen: set
    threshold: float
    mode: str

    def as_dict(self, class_names=None):
        name = (lambda i: class_names[i]) if class_names else (lambda i: int(i))
        return {"threshold": self.threshold, "mode": self.mode,
                "seen": sorted(name(i) for i in self.seen),
                "unseen": sorted(name(i) for i in self.unseen)}


@dataclass
class PrototypeSet:
    """Per-class representative vectors (mask-pooled means or text concats)."""

    class_names: list
    vectors: np.ndarray                 # (N, C)
    absent: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.class_names):
            raise ShapeError(
                f"prototype matrix {self.vectors.shape} does not match "
                f"{len(self.class_names)} class names")


def textual_prototypes(texts):
    """Concatenated (global || local) text embeddings as class representations."""
    g = texts.global_vecs.data
    l = texts.local_vecs.data
    return PrototypeSet(list(texts.class_names), np.concatenate([g, l], axis=1))


def partition_classes(train_protos, test_protos, threshold=0.9, mode="visual"):
    """Split test classes: seen iff max cosine to any training class exceeds threshold."""
    if mode not in ("visual", "textual"):
        raise ValueError(f"mode must be visual or textual, got {mode!r}")
    a = train_protos.vectors
    b = test_protos.vectors
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"embedding widths differ: train {a.shape[1]}, test {b.shape[1]}")
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    best = (bn @ an.T).max(axis=1)
    seen = {i for i in range(len(best)) if best[i] > threshold}
    unseen = set(range(len(best))) - seen
    return ClassPartition(seen, unseen, threshold, mode)


def subset_miou(confusion, partition):
    """(seen mIoU, unseen mIoU); None where a subset is empty or all-absent."""
    iou = confusion.per_class_iou()

    def mean_over(indices):
        vals = [iou[i] for i in indices if i < len(iou) and not np.isnan(iou[i])]
        return float(np.mean(vals)) if vals else None

    return mean_over(partition.seen), mean_over(partition.unseen)


def ridge_r2(texts, prototypes, alpha=1.0, folds=5, seed=0):
    """Cross-validated R-squared of a ridge map from text rows to prototype rows.

    Rows of both matrices are L2-normalized first. Fold assignment is a seeded
    shuffle into contiguous blocks; the held-out predictions from all folds are
    pooled and R-squared is averaged uniformly over output dimensions.
    """
    x = np.asarray(texts, dtype=np.float64)
    y = np.asarray(prototypes, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n < folds:
        raise ValueError(f"need at least {folds} rows for {folds}-fold CV, got {n}")
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    y = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    order = np.random.default_rng(seed).permutation(n)
    blocks = np.array_split(order, folds)
    pred = np.empty_like(y)
    for held in blocks:
        train = np.setdiff1d(order, held)
        xt, yt = x[train], y[train]
        gram = xt.T @ xt + alpha * np.eye(x.shape[1])
        weights = np.linalg.solve(gram, xt.T @ yt)
        pred[held] = x[held] @ weights
    ss_res = ((y - pred) ** 2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, 0.0)
    return float(r2.mean())


def nearest_downsample(mask, gh, gw):
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = ((np.arange(gh) + 0.5) * h / gh).astype(int).clip(0, h - 1)
    cols = ((np.arange(gw) + 0.5) * w / gw).astype(int).clip(0, w - 1)
    return mask[rows[:, None], cols[None, :]]


def mask_pool_prototypes(features, masks, n_classes, class_names=None):
    """Per-class mean of feature vectors under each class's mask cells.

    Masks larger than the feature grid are nearest-downsampled. Classes with
    no cells anywhere are excluded and listed in `absent`.
    """
    sums = None
    counts = np.zeros(n_classes)
    for fmap, mask in zip(features, masks):
        data = fmap.data if hasattr(fmap, "requires_grad") else np.asarray(fmap)
        c, gh, gw = data.shape
        if sums is None:
            sums = np.zeros((n_classes, c))
        m = nearest_downsample(mask, gh, gw)
        flat = data.reshape(c, -1).T               # (cells, C)
        labels = m.reshape(-1)
        for cls in range(n_classes):
            sel = labels == cls
            if sel.any():
                sums[cls] += flat[sel].sum(axis=0)
                counts[cls] += sel.sum()
    names = class_names or [str(i) for i in range(n_classes)]
    present = counts > 0
    vectors = sums[present] / counts[present, None]
    kept = [names[i] for i in range(n_classes) if present[i]]
    absent = [names[i] for i in range(n_classes) if not present[i]]
    return PrototypeSet(kept, vectors, absent=absent)
