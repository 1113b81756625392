"""PNG input/output for images, index maps, and color overlays."""

import numpy as np
from PIL import Image


def read_image(path):
    """PNG/JPEG file -> (3, H, W) float64 in [0, 1]."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return rgb.transpose(2, 0, 1)


def write_image(path, image):
    """(3, H, W) float in [0, 1] -> PNG."""
    arr = (np.clip(image, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def read_index_png(path):
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "I"):
            img = img.convert("L")
        return np.asarray(img, dtype=np.int64)


def write_index_png(path, labels):
    labels = np.asarray(labels)
    if labels.max() > 255:
        raise ValueError("index PNG supports at most 256 classes")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def class_palette(n):
    """Deterministic, well-spread RGB colors (golden-angle hue walk)."""
    colors = np.zeros((n, 3))
    for i in range(n):
        h = (i * 0.61803398875) % 1.0
        colors[i] = _hsv_to_rgb(h, 0.65, 0.95)
    return colors


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def write_color_png(path, labels, n_classes=None):
    labels = np.asarray(labels)
    n = n_classes or int(labels.max()) + 1
    palette = (class_palette(n) * 255).astype(np.uint8)
    Image.fromarray(palette[labels], mode="RGB").save(path)
