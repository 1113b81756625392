"""Synthetic-scene training loop.

Scenes are textured rectangle arrangements whose classes are named by text, so
the whole pipeline (text encoding included) trains end to end. Optimization is
AdamW with two learning-rate tiers (backbone vs head) under a cosine schedule.
Training always runs on single crops; tiled aggregation is inference-only.
"""

import csv
import dataclasses
import os
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import predict
from .errors import TrainingDiverged
from .evaluation import miou
from .losses import dice_loss, focal_loss, one_hot_targets
from .tensorio import save_checkpoint

DEFAULT_CLASS_NAMES = ("brick", "grass", "water", "sand",
                       "bark", "slate", "coral", "moss")

# well-separated base colors keep the patch textures linearly separable
_PALETTE = {
    "brick": (0.80, 0.20, 0.18), "grass": (0.18, 0.75, 0.22),
    "water": (0.15, 0.35, 0.90), "sand": (0.92, 0.83, 0.45),
    "bark": (0.45, 0.28, 0.10), "slate": (0.45, 0.50, 0.58),
    "coral": (0.95, 0.50, 0.55), "moss": (0.25, 0.45, 0.20),
}


@dataclass
class SyntheticScene:
    image: np.ndarray        # (3, S, S) float in [0, 1]
    mask: np.ndarray         # (S, S) int class indices
    class_names: list


def _texture_params(name):
    r = np.random.default_rng(zlib.crc32(name.encode("utf-8")))
    color = np.array(_PALETTE.get(name) or r.uniform(0.15, 0.85, size=3))
    freq = r.uniform(0.15, 0.6)
    angle = r.uniform(0, np.pi)
    return color, freq, angle


def _paint(mask, names, rng):
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    image = np.zeros((3, size, size))
    for cls, name in enumerate(names):
        color, freq, angle = _texture_params(name)
        phase = np.cos(freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        tex = color[:, None, None] * (0.85 + 0.15 * phase[None])
        sel = mask == cls
        image[:, sel] = tex[:, sel]
    image += rng.normal(0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_scene(seed, n_classes, size, class_names=None):
    """Deterministic rectangle scene; every class occupies >= 1% of the pixels.

    Foreground rectangles are anchored to disjoint grid cells so no class is
    ever occluded into a sliver; the first class is the background fill.
    """
    if n_classes < 2:
        raise ValueError("scenes need at least 2 classes")
    names = list(class_names or DEFAULT_CLASS_NAMES[:n_classes])
    if len(names) != n_classes:
        raise ValueError(f"need {n_classes} class names, got {len(names)}")
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=np.int64)
    grid = int(np.ceil(np.sqrt(n_classes - 1)))
    cells = [(r, c) for r in range(grid) for c in range(grid)]
    chosen = [cells[i] for i in rng.permutation(len(cells))[:n_classes - 1]]
    cell = size // grid
    for cls, (cr, cc) in enumerate(chosen, start=1):
        h = max(int(rng.uniform(0.55, 0.9) * cell), 1)
        w = max(int(rng.uniform(0.55, 0.9) * cell), 1)
        r = cr * cell + int(rng.integers(0, cell - h + 1))
        c = cc * cell + int(rng.integers(0, cell - w + 1))
        mask[r:r + h, c:c + w] = cls
    counts = np.bincount(mask.reshape(-1), minlength=n_classes)
    assert (counts >= max(int(0.01 * size * size), 1)).all(), "coverage invariant broken"
    return SyntheticScene(_paint(mask, names, rng), mask, names)


def scene_dataset(n_scenes, n_classes, size, seed=0, class_names=None):
    return [generate_scene(seed + i, n_classes, size, class_names)
            for i in range(n_scenes)]


def patch_probe_accuracy(scenes, patch=16):
    """Least-squares probe on raw patches vs majority patch labels (separability oracle)."""
    xs, ys = [], []
    n_classes = len(scenes[0].class_names)
    for scene in scenes:
        size = scene.mask.shape[0]
        g = size // patch
        img = scene.image.reshape(3, g, patch, g, patch)
        flat = img.transpose(1, 3, 0, 2, 4).reshape(g * g, -1)
        lab = scene.mask.reshape(g, patch, g, patch).transpose(0, 2, 1, 3)
        lab = lab.reshape(g * g, -1)
        majority = np.array([np.bincount(row, minlength=n_classes).argmax()
                             for row in lab])
        xs.append(flat)
        ys.append(majority)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    onehot = np.eye(n_classes)[y]
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    w, *_ = np.linalg.lstsq(xb, onehot, rcond=None)
    pred = (xb @ w).argmax(axis=1)
    return float((pred == y).mean())


def cosine_lr(step, total):
    """Decay factor: 1 at step 0, 0 at step == total."""
    return 0.5 * (1.0 + np.cos(np.pi * min(step, total) / total))


class AdamW:
    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        """groups: list of dicts {params: [(name, Parameter)], lr: float}."""
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.state = {}
        for group in groups:
            for name, p in group["params"]:
                self.state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))

    def step(self, lr_scale=1.0):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for group in self.groups:
            lr = group["lr"] * lr_scale
            for name, p in group["params"]:
                if p.grad is None:
                    continue
                m, v = self.state[name]
                g = p.grad
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.wd:
                    update = update + self.wd * p.data
                p.data = p.data - lr * update

    def zero_grad(self):
        for group in self.groups:
            for _, p in group["params"]:
                p.zero_grad()


def _crop_flip(scene, crop, rng, augment=True):
    size = scene.mask.shape[0]
    r = int(rng.integers(0, size - crop + 1)) if size > crop else 0
    c = int(rng.integers(0, size - crop + 1)) if size > crop else 0
    img = scene.image[:, r:r + crop, c:c + crop]
    mask = scene.mask[r:r + crop, c:c + crop]
    if augment and rng.random() < 0.5:
        img = img[:, :, ::-1]
        mask = mask[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(mask)


def training_set_miou(model, scenes, texts=None):
    names = scenes[0].class_names
    texts = texts or model.encode_texts(names)
    preds, targets = [], []
    for scene in scenes:
        logits = model.forward(Tensor(scene.image.astype(_model_dtype(model))), texts)
        preds.append(predict(logits).labels)
        targets.append(scene.mask)
    value, _ = miou(preds, targets, n_classes=len(names))
    return value


def _model_dtype(model):
    return next(iter(model.parameters())).data.dtype


def train(model, scenes, cfg, out_dir=None, seed=0, log=None):
    """Optimize the model on the scene list; returns the loss-curve history.

    History rows: (iteration, focal, dice, combined, miou-or-nan). Raises
    TrainingDiverged with a diagnostic payload if the loss goes non-finite.
    """
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    model.astype(dtype)
    groups = model.param_groups()
    opt = AdamW([{"params": groups["backbone"], "lr": cfg.lr_backbone},
                 {"params": groups["head"], "lr": cfg.lr_head}],
                weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    names = scenes[0].class_names
    gamma = cfg.loss.gamma if cfg.focal_dice else 0.0
    lam = cfg.loss.lam if cfg.focal_dice else 0.0
    history = []
    reached = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for it in range(cfg.iters):
        batch_ids = rng.integers(0, len(scenes), size=cfg.batch)
        texts = model.encode_texts(names)
        focal_sum = dice_sum = 0.0
        total = None
        for idx in batch_ids:
            img, mask = _crop_flip(scenes[idx], cfg.crop, rng, cfg.augment)
            logits = model.forward(Tensor(img.astype(dtype)), texts)
            probs = ad.sigmoid(logits)
            target = one_hot_targets(mask, len(names), dtype)
            f = focal_loss(probs, target, gamma)
            d = dice_loss(probs, target, cfg.loss.dice_eps)
            sample = f + lam * d
            focal_sum += f.item()
            dice_sum += d.item()
            total = sample if total is None else total + sample
        total = total * (1.0 / cfg.batch)
        loss_val = total.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}",
                diagnostics={"iteration": it, "scenes": batch_ids.tolist(),
                             "focal": focal_sum / cfg.batch,
                             "dice": dice_sum / cfg.batch})
        opt.zero_grad()
        total.backward()
        opt.step(lr_scale=cosine_lr(it, cfg.iters))
        row = [it, focal_sum / cfg.batch, dice_sum / cfg.batch, loss_val, np.nan]
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            row[4] = training_set_miou(model, scenes)
            if log:
                log(f"iter {it + 1}: loss {loss_val:.4f} train mIoU {row[4]:.4f}")
            if cfg.target_miou > 0 and row[4] >= cfg.target_miou:
                history.append(row)
                reached = row[4]
                break
        elif log and cfg.log_every and (it + 1) % cfg.log_every == 0:
            log(f"iter {it + 1}: loss {loss_val:.4f}")
        history.append(row)
        if out_dir and cfg.save_every and (it + 1) % cfg.save_every == 0:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{it + 1:06d}.ovsg"), model,
                            meta=_ckpt_meta(model, it + 1, names))
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "ckpt.ovsg"), model,
                        meta=_ckpt_meta(model, len(history), names))
        write_history(os.path.join(out_dir, "loss_curve.csv"), history)
    return history, reached


def _ckpt_meta(model, iteration, class_names):
    return {"iteration": iteration, "class_names": list(class_names),
            "model": dataclasses.asdict(model.config)}


def write_history(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "focal", "dice", "combined", "train_miou"])
        for row in history:
            writer.writerow(row)
