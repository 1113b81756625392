"""Numba-jitted hot kernels: conv lowering, bilinear resampling, confusion counts.

Loops are written in scalar form for njit; parallel is kept off so summation
order (and therefore output bits) stays fixed across runs.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def im2col(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    cols = np.zeros((B, C * kh * kw, OH * OW), dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for oi in range(OH):
                        yi = oi * stride + i - pad
                        if yi < 0 or yi >= H:
                            continue
                        for oj in range(OW):
                            xj = oj * stride + j - pad
                            if 0 <= xj < W:
                                cols[b, row, oi * OW + oj] = x[b, c, yi, xj]
    return cols


@njit(cache=True)
def col2im(cols, B, C, H, W, kh, kw, stride, pad):
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, C, H, W), dtype=cols.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for oi in range(OH):
                        yi = oi * stride + i - pad
                        if yi < 0 or yi >= H:
                            continue
                        for oj in range(OW):
                            xj = oj * stride + j - pad
                            if 0 <= xj < W:
                                out[b, c, yi, xj] += cols[b, row, oi * OW + oj]
    return out


@njit(cache=True)
def bilinear_resize(x, oh, ow):
    B, C, H, W = x.shape
    out = np.empty((B, C, oh, ow), dtype=x.dtype)
    sh = H / oh
    sw = W / ow
    for oi in range(oh):
        src_r = (oi + 0.5) * sh - 0.5
        r0 = int(np.floor(src_r))
        tr = src_r - r0
        if r0 < 0:
            r0 = 0
        if r0 > H - 1:
            r0 = H - 1
        r1 = r0 + 1 if r0 + 1 < H else H - 1
        for oj in range(ow):
            src_c = (oj + 0.5) * sw - 0.5
            c0 = int(np.floor(src_c))
            tc = src_c - c0
            if c0 < 0:
                c0 = 0
            if c0 > W - 1:
                c0 = W - 1
            c1 = c0 + 1 if c0 + 1 < W else W - 1
            for b in range(B):
                for c in range(C):
                    top = x[b, c, r0, c0] * (1 - tc) + x[b, c, r0, c1] * tc
                    bot = x[b, c, r1, c0] * (1 - tc) + x[b, c, r1, c1] * tc
                    out[b, c, oi, oj] = top * (1 - tr) + bot * tr
    return out


@njit(cache=True)
def bilinear_resize_grad(gy, ih, iw):
    B, C, OH, OW = gy.shape
    gx = np.zeros((B, C, ih, iw), dtype=gy.dtype)
    sh = ih / OH
    sw = iw / OW
    for oi in range(OH):
        src_r = (oi + 0.5) * sh - 0.5
        r0 = int(np.floor(src_r))
        tr = src_r - r0
        if r0 < 0:
            r0 = 0
        if r0 > ih - 1:
            r0 = ih - 1
        r1 = r0 + 1 if r0 + 1 < ih else ih - 1
        for oj in range(OW):
            src_c = (oj + 0.5) * sw - 0.5
            c0 = int(np.floor(src_c))
            tc = src_c - c0
            if c0 < 0:
                c0 = 0
            if c0 > iw - 1:
                c0 = iw - 1
            c1 = c0 + 1 if c0 + 1 < iw else iw - 1
            for b in range(B):
                for c in range(C):
                    g = gy[b, c, oi, oj]
                    gx[b, c, r0, c0] += g * (1 - tr) * (1 - tc)
                    gx[b, c, r0, c1] += g * (1 - tr) * tc
                    gx[b, c, r1, c0] += g * tr * (1 - tc)
                    gx[b, c, r1, c1] += g * tr * tc
    return gx


@njit(cache=True)
def confusion_accumulate(conf, gt, pred, ignore_label):
    for i in range(gt.shape[0]):
        g = gt[i]
        if g == ignore_label:
            continue
        conf[g, pred[i]] += 1
    return conf
