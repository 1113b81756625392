"""Pure-numpy reference implementations of the hot kernels.

Selected when OVSEG_BACKEND=numpy (or when numba is unavailable). Keeps the
same signatures and semantics as the numba path; used as the ground truth in
the backend-equivalence tests.
"""

import numpy as np

NAME = "numpy"


def im2col(x, kh, kw, stride, pad):
    """Lower (B,C,H,W) into patch columns (B, C*kh*kw, OH*OW) for conv-as-matmul."""
    B, C, H, W = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,C,OH,OW,kh,kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, OH * OW)
    return np.ascontiguousarray(cols)


def col2im(cols, B, C, H, W, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add columns back onto the (B,C,H,W) grid."""
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    g = cols.reshape(B, C, kh, kw, OH, OW)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += g[:, :, i, j]
    if pad > 0:
        out = out[:, :, pad:H + pad, pad:W + pad]
    return np.ascontiguousarray(out)


def _bilinear_coords(n_out, n_in):
    # half-pixel centers, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    i0 = np.clip(i0, 0, n_in - 1)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    return i0, i1, t


def bilinear_resize(x, oh, ow):
    """Resize (B,C,H,W) to (B,C,oh,ow) with half-pixel bilinear interpolation."""
    B, C, H, W = x.shape
    r0, r1, tr = _bilinear_coords(oh, H)
    c0, c1, tc = _bilinear_coords(ow, W)
    tr = tr.astype(x.dtype)[:, None]
    tc = tc.astype(x.dtype)[None, :]
    x00 = x[:, :, r0[:, None], c0[None, :]]
    x01 = x[:, :, r0[:, None], c1[None, :]]
    x10 = x[:, :, r1[:, None], c0[None, :]]
    x11 = x[:, :, r1[:, None], c1[None, :]]
    top = x00 * (1 - tc) + x01 * tc
    bot = x10 * (1 - tc) + x11 * tc
    return top * (1 - tr) + bot * tr


def bilinear_resize_grad(gy, ih, iw):
    """Adjoint of bilinear_resize: scatter output grads back to the input grid."""
    B, C, OH, OW = gy.shape
    r0, r1, tr = _bilinear_coords(OH, ih)
    c0, c1, tc = _bilinear_coords(OW, iw)
    gx = np.zeros((B, C, ih, iw), dtype=gy.dtype)
    tr = tr.astype(gy.dtype)[:, None]
    tc = tc.astype(gy.dtype)[None, :]
    rr0 = np.broadcast_to(r0[:, None], (OH, OW))
    rr1 = np.broadcast_to(r1[:, None], (OH, OW))
    cc0 = np.broadcast_to(c0[None, :], (OH, OW))
    cc1 = np.broadcast_to(c1[None, :], (OH, OW))
    for (rr, cc, w) in (
        (rr0, cc0, (1 - tr) * (1 - tc)),
        (rr0, cc1, (1 - tr) * tc),
        (rr1, cc0, tr * (1 - tc)),
        (rr1, cc1, tr * tc),
    ):
        np.add.at(gx, (slice(None), slice(None), rr, cc), gy * w)
    return gx


def confusion_accumulate(conf, gt, pred, ignore_label):
    """Accumulate flat label arrays into an (N,N) confusion matrix in place."""
    n = conf.shape[0]
    keep = gt != ignore_label if ignore_label >= 0 else slice(None)
    g = gt[keep]
    p = pred[keep]
    idx = g.astype(np.int64) * n + p.astype(np.int64)
    conf += np.bincount(idx, minlength=n * n).reshape(n, n).astype(conf.dtype)
    return conf
