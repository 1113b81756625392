import numpy as np
import pytest

from ovseg.encoders import (GuidancePyramid, PriorEncoder, TextEncoder,
                            TextEmbeddingSet, VisionEncoder, check_image)
from ovseg.autodiff import Tensor
from ovseg.errors import ShapeError


def make_image(seed, h=384, w=384):
    return np.random.default_rng(seed).random((3, h, w))


def test_vision_encode_shapes_384():
    enc = VisionEncoder(np.random.default_rng(0), channels=64, patch=16)
    cls_vec, feats = enc(make_image(1))
    assert cls_vec.shape == (64,)
    assert feats.shape == (64, 24, 24)


def test_vision_encode_shapes_640():
    # inference resolution: 640/16 = 40
    enc = VisionEncoder(np.random.default_rng(0), channels=32, patch=16, depth=1)
    _, feats = enc(make_image(2, 640, 640))
    assert feats.shape == (32, 40, 40)


def test_vision_encode_rejects_indivisible_dims():
    enc = VisionEncoder(np.random.default_rng(0))
    with pytest.raises(ShapeError, match="height"):
        enc(np.zeros((3, 386, 384)))
    with pytest.raises(ShapeError, match="width"):
        enc(np.zeros((3, 384, 390)))


def test_vision_encode_deterministic_under_seed():
    img = make_image(3, 128, 128)
    a = VisionEncoder(np.random.default_rng(42), channels=32, depth=1)
    b = VisionEncoder(np.random.default_rng(42), channels=32, depth=1)
    ca, fa = a(img)
    cb, fb = b(img)
    assert np.array_equal(fa.data, fb.data)
    assert np.array_equal(ca.data, cb.data)


def test_text_encode_shapes_and_mean():
    enc = TextEncoder(np.random.default_rng(0), channels=64)
    ts = enc(["cat"])
    assert ts.global_vecs.shape == (1, 64)
    assert ts.local_vecs.shape == (1, 64)
    assert ts.mean_vecs.shape == (1, 64)
    assert np.allclose(ts.mean_vecs.data,
                       (ts.global_vecs.data + ts.local_vecs.data) / 2)
    # heads emit unit rows
    assert np.allclose(np.linalg.norm(ts.global_vecs.data, axis=1), 1.0)


def test_text_encode_purity_and_repeats():
    enc = TextEncoder(np.random.default_rng(0))
    ts = enc(["dog", "dog", "cat"])
    assert np.array_equal(ts.global_vecs.data[0], ts.global_vecs.data[1])
    solo = enc(["cat"])
    assert np.allclose(ts.global_vecs.data[2], solo.global_vecs.data[0])
    assert np.allclose(ts.local_vecs.data[2], solo.local_vecs.data[0])


def test_text_encode_permutation():
    enc = TextEncoder(np.random.default_rng(0))
    ab = enc(["cat", "dog"])
    ba = enc(["dog", "cat"])
    assert np.allclose(ab.global_vecs.data[0], ba.global_vecs.data[1])
    assert np.allclose(ab.local_vecs.data[1], ba.local_vecs.data[0])


def test_text_encode_rejects_bad_input():
    enc = TextEncoder(np.random.default_rng(0))
    with pytest.raises(ValueError):
        enc([])
    with pytest.raises(ValueError):
        enc(["cat", "  "])


def test_text_set_rejects_zero_rows():
    with pytest.raises(ValueError, match="zero row"):
        TextEmbeddingSet(["a"], Tensor(np.zeros((1, 4))), Tensor(np.ones((1, 4))))


def test_spe_three_taps_shared_resolution():
    enc = PriorEncoder(np.random.default_rng(0), channels=32, depth=3, heads=4)
    pyr = enc(make_image(4))
    assert pyr.shallow.shape == pyr.mid.shape == pyr.deep.shape == (32, 24, 24)


def test_spe_deterministic_and_sensitive():
    enc = PriorEncoder(np.random.default_rng(5), channels=32, depth=3)
    img = make_image(6, 128, 128)
    p1 = enc(img)
    p2 = enc(img)
    assert np.array_equal(p1.deep.data, p2.deep.data)
    other = enc(make_image(7, 128, 128))
    assert not np.allclose(p1.deep.data, other.deep.data)


def test_guidance_pyramid_shape_check():
    a = Tensor(np.zeros((4, 8, 8)))
    b = Tensor(np.zeros((4, 8, 9)))
    with pytest.raises(ShapeError):
        GuidancePyramid(a, a, b)


def test_check_image_passes_valid():
    check_image(np.zeros((3, 64, 32)), 16)
