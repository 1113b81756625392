import numpy as np
import pytest

from ovseg.autodiff import Tensor, numeric_grad
from ovseg.early_refinement import (EarlyRefiner, rope_apply, rope_rotate,
                                    window_partition)
from ovseg.errors import ConfigError, ShapeError

rng = np.random.default_rng(11)


# -- rotary encoding -------------------------------------------------------

def test_rope_position_zero_is_identity():
    x = rng.standard_normal((5, 8))
    out = rope_rotate(Tensor(x), np.zeros(5, dtype=int), np.zeros(5, dtype=int))
    assert np.allclose(out.data, x)


def test_rope_norm_preserved():
    x = rng.standard_normal((7, 16))
    out = rope_rotate(Tensor(x), np.arange(7), np.arange(7)[::-1])
    assert np.allclose(np.linalg.norm(out.data, axis=1),
                       np.linalg.norm(x, axis=1))


def test_rope_relative_position_invariance():
    q = rng.standard_normal(16)
    k = rng.standard_normal(16)

    def score(pq, pk):
        rq = rope_rotate(Tensor(q[None]), np.array([pq[0]]), np.array([pq[1]]))
        rk = rope_rotate(Tensor(k[None]), np.array([pk[0]]), np.array([pk[1]]))
        return float((rq.data * rk.data).sum())

    base = score((2, 5), (4, 1))
    for delta in [(1, 0), (0, 3), (7, -2), (-2, -2)]:
        shifted = score((2 + delta[0], 5 + delta[1]), (4 + delta[0], 1 + delta[1]))
        assert abs(shifted - base) < 1e-6


def test_rope_rejects_odd_channels():
    with pytest.raises(ConfigError):
        rope_rotate(Tensor(np.zeros((2, 7))), np.zeros(2, int), np.zeros(2, int))
    with pytest.raises(ConfigError):
        rope_apply(Tensor(np.zeros((6, 2, 2))))


def test_rope_apply_feature_map_layout():
    x = rng.standard_normal((8, 3, 4))
    out = rope_apply(Tensor(x))
    assert out.shape == (8, 3, 4)
    # position (0,0) untouched
    assert np.allclose(out.data[:, 0, 0], x[:, 0, 0])


# -- window partition ------------------------------------------------------

def test_window_partition_covers_each_position_once():
    groups = window_partition(7, 5, 3)
    seen = np.concatenate([idx.reshape(-1) for idx in groups.values()])
    assert sorted(seen.tolist()) == list(range(35))


def test_window_partition_exact_tiling_single_group():
    groups = window_partition(6, 6, 3)
    assert list(groups) == [(3, 3)]
    assert groups[(3, 3)].shape == (4, 9)


# -- refiner ---------------------------------------------------------------

def make_refiner(channels=8, patch=2, window=3, heads=2, seed=0):
    return EarlyRefiner(np.random.default_rng(seed), channels=channels,
                        patch=patch, window=window, heads=heads)


def test_constant_features_pass_through():
    ref = make_refiner()
    v0 = rng.standard_normal(8)
    feats = np.broadcast_to(v0[:, None, None], (8, 4, 4)).copy()
    out = ref(rng.random((3, 8, 8)), Tensor(feats))
    assert np.allclose(out.data, feats, atol=1e-12)


def test_window_one_is_identity():
    ref = make_refiner(window=1)
    feats = rng.standard_normal((8, 4, 4))
    out = ref(rng.random((3, 8, 8)), Tensor(feats))
    assert np.allclose(out.data, feats, atol=1e-14)


def test_shape_mismatch_raises():
    ref = make_refiner()
    with pytest.raises(ShapeError):
        ref(rng.random((3, 8, 8)), Tensor(rng.standard_normal((8, 5, 4))))


def test_recombination_oracle_24x24():
    """Output must rebuild exactly from extracted weights and window values."""
    ref = make_refiner(channels=64, patch=16, window=3, heads=2, seed=3)
    feats = rng.standard_normal((64, 24, 24))
    img = rng.random((3, 384, 384))
    out, weight_log = ref(img, Tensor(feats), return_weights=True)
    values = feats.transpose(1, 2, 0).reshape(-1, 64)
    rebuilt = np.zeros_like(values)
    for idx, attn in weight_log:
        for g in range(idx.shape[0]):
            rebuilt[idx[g]] = attn[g] @ values[idx[g]]
    rebuilt = rebuilt.reshape(24, 24, 64).transpose(2, 0, 1)
    assert np.abs(out.data - rebuilt).max() <= 1e-5
    # convexity: weights nonnegative, rows sum to one
    for _, attn in weight_log:
        assert attn.min() >= 0
        assert np.allclose(attn.sum(-1), 1.0)


def test_gradient_check_8x4x4():
    ref = make_refiner()
    img = rng.random((3, 8, 8))
    feats = rng.standard_normal((8, 4, 4))

    def loss_from_feats(arr):
        return (ref(img, Tensor(arr)) ** 2.0).sum()

    t = Tensor(feats.copy(), requires_grad=True)
    out = (ref(img, t) ** 2.0).sum()
    ref.zero_grad()
    out.backward()
    num = numeric_grad(lambda a: loss_from_feats(a).item(), feats.copy())
    rel = np.abs(t.grad - num).max() / max(np.abs(num).max(), 1e-12)
    assert rel <= 1e-4

    # parameter gradients too (query projection)
    w = ref.q_proj.w
    saved = w.data.copy()

    def loss_from_w(arr):
        w.data = arr
        val = (ref(img, Tensor(feats)) ** 2.0).sum().item()
        w.data = saved
        return val

    ref.zero_grad()
    (ref(img, Tensor(feats)) ** 2.0).sum().backward()
    num_w = numeric_grad(loss_from_w, saved.copy())
    rel_w = np.abs(w.grad - num_w).max() / max(np.abs(num_w).max(), 1e-12)
    assert rel_w <= 1e-4
