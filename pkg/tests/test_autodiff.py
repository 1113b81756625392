"""Gradient checks for every autodiff primitive against central differences."""

import numpy as np
import pytest

from ovseg import autodiff as ad
from ovseg.autodiff import Tensor, numeric_grad

rng = np.random.default_rng(0)


def check_grad(build, x, tol=1e-7, eps=1e-6):
    """build(Tensor) -> scalar Tensor; compares analytic grad at x to FD."""
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = build(t)
    out.backward()
    num = numeric_grad(lambda arr: build(Tensor(arr)).item(), x, eps)
    denom = max(np.abs(num).max(), 1e-12)
    rel = np.abs(t.grad - num).max() / denom
    assert rel < tol, f"rel err {rel:.3e}"


def test_add_mul_broadcast():
    x = rng.standard_normal((3, 4))
    b = Tensor(rng.standard_normal(4))
    check_grad(lambda t: ((t + b) * (t * 2.0 + 1.0)).sum(), x)


def test_sub_div_pow():
    x = rng.standard_normal((5,)) + 3.0
    check_grad(lambda t: ((t - 0.5) / (t ** 2.0)).sum(), x)


def test_exp_log_sqrt_tanh_sigmoid():
    x = rng.standard_normal((4, 3)) * 0.5 + 2.0
    check_grad(lambda t: ad.exp(t * 0.1).sum(), x)
    check_grad(lambda t: ad.log(t).sum(), x)
    check_grad(lambda t: ad.sqrt(t).sum(), x)
    check_grad(lambda t: ad.tanh(t).sum(), x)
    check_grad(lambda t: ad.sigmoid(t).sum(), x)


def test_gelu():
    x = rng.standard_normal((6,))
    check_grad(lambda t: ad.gelu(t).sum(), x, tol=1e-6)


def test_clamp_passes_inside_blocks_outside():
    x = np.array([-2.0, 0.3, 2.0])
    t = Tensor(x, requires_grad=True)
    ad.clamp(t, 0.0, 1.0).sum().backward()
    assert np.array_equal(t.grad, [0.0, 1.0, 0.0])


def test_reductions():
    x = rng.standard_normal((3, 4, 2))
    check_grad(lambda t: (t.sum(axis=(0, 2)) ** 2.0).sum(), x)
    check_grad(lambda t: (t.mean(axis=1, keepdims=True) * 3.0).sum(), x)


def test_softmax_rows_sum_to_one_and_grad():
    x = rng.standard_normal((5, 7))
    s = ad.softmax(Tensor(x), axis=-1)
    assert np.allclose(s.data.sum(-1), 1.0)
    w = rng.standard_normal((5, 7))
    check_grad(lambda t: (ad.softmax(t, axis=-1) * w).sum(), x, tol=1e-6)


def test_shape_ops():
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 3, 2))
    check_grad(lambda t: (t.reshape(6, 4) ** 2.0).sum(), x)
    check_grad(lambda t: (t.transpose(2, 1, 0) * w).sum(), x)
    check_grad(lambda t: ad.roll(t, (1, -2), axis=(0, 2)).sum(), x)
    check_grad(lambda t: (ad.pad2d(t, (1, 0), (2, 1)) ** 2.0).sum(), x)


def test_concat_and_take():
    x = rng.standard_normal((4, 3))
    idx = np.array([0, 2, 2, 3])
    check_grad(lambda t: ad.concat([t * 2.0, t], axis=1).sum(), x)
    check_grad(lambda t: (t[idx] ** 2.0).sum(), x)


def test_matmul_batched():
    a = rng.standard_normal((2, 3, 4))
    w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    check_grad(lambda t: (t @ w).sum(), a)
    w.zero_grad()
    out = (Tensor(a) @ w).sum()
    out.backward()
    num = numeric_grad(lambda arr: float(np.matmul(a, arr).sum()), w.data.copy())
    assert np.abs(w.grad - num).max() < 1e-7


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 0, 2), (2, 1, 3)])
def test_conv2d_matches_direct_and_grads(stride, pad, k):
    x = rng.standard_normal((2, 3, 6, 7))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
    # direct sliding-dot oracle
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    OH = (6 + 2 * pad - k) // stride + 1
    OW = (7 + 2 * pad - k) // stride + 1
    ref = np.zeros((2, 4, OH, OW))
    for bi in range(2):
        for oc in range(4):
            for i in range(OH):
                for j in range(OW):
                    patch = xp[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    ref[bi, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    assert np.allclose(out.data, ref, atol=1e-10)
    check_grad(lambda t: (ad.conv2d(t, Tensor(w), Tensor(b), stride=stride, pad=pad) ** 2.0).sum(),
               x, tol=1e-6)
    check_grad(lambda t: (ad.conv2d(Tensor(x), t, Tensor(b), stride=stride, pad=pad) ** 2.0).sum(),
               w, tol=1e-6)


def test_conv_transpose2d_matches_scatter_oracle():
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, 2, 2))
    out = ad.conv_transpose2d(Tensor(x), Tensor(w))
    ref = np.zeros((2, 2, 8, 10))
    for bi in range(2):
        for ic in range(3):
            for i in range(4):
                for j in range(5):
                    for di in range(2):
                        for dj in range(2):
                            ref[bi, :, 2 * i + di, 2 * j + dj] += w[ic, :, di, dj] * x[bi, ic, i, j]
    assert np.allclose(out.data, ref, atol=1e-10)
    check_grad(lambda t: (ad.conv_transpose2d(t, Tensor(w)) ** 2.0).sum(), x, tol=1e-6)
    check_grad(lambda t: (ad.conv_transpose2d(Tensor(x), t) ** 2.0).sum(), w, tol=1e-6)


def test_bilinear_resize_grad_and_constant_preservation():
    x = rng.standard_normal((1, 2, 4, 4))
    check_grad(lambda t: (ad.bilinear_resize(t, 8, 8) ** 2.0).sum(), x, tol=1e-6)
    const = np.full((1, 1, 3, 5), 2.5)
    up = ad.bilinear_resize(Tensor(const), 9, 10)
    assert np.allclose(up.data, 2.5)


def test_backward_accumulates_through_diamond():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    z = (y + x) * y  # dz/dx = d((3x+x)*3x)/dx = 24x
    z.backward()
    assert np.allclose(x.grad, 24.0 * x.data)


def test_scalar_ops_preserve_float32():
    t = Tensor(np.ones((2, 2), dtype=np.float32))
    assert (t + 1.0).dtype == np.float32
    assert (t * 0.5).dtype == np.float32
    assert ad.gelu(t).dtype == np.float32
