import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovseg.config import InferConfig, ModelConfig
from ovseg.encoders import VisionEncoder
from ovseg.errors import AlignmentError, ConfigError
from ovseg.lga import infer, lga_features, merge_tiles, plan_tiles
from ovseg.model import SegModel

rng = np.random.default_rng(61)


# -- tile planning -----------------------------------------------------------

def test_default_plan_is_four_tiles():
    plan = plan_tiles(InferConfig(resize=640, window=384, overlap=128))
    assert plan.stride == 256
    assert plan.origins == [(0, 0), (0, 256), (256, 0), (256, 256)]
    assert plan.n_tiles == 4


def test_single_tile_when_window_covers_image():
    plan = plan_tiles(InferConfig(resize=384, window=384, overlap=128))
    assert plan.origins == [(0, 0)]


def test_terminal_clamping_600():
    plan = plan_tiles(InferConfig(resize=600, window=384, overlap=128))
    rows = sorted({r for r, _ in plan.origins})
    assert rows == [0, 216]


def test_overlap_must_be_smaller_than_window():
    with pytest.raises(ConfigError):
        plan_tiles(InferConfig(resize=640, window=384, overlap=384))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 39))
def test_plan_covers_every_pixel(size, window, overlap):
    window = min(window, size)
    overlap = min(overlap, window - 1)
    plan = plan_tiles(InferConfig(resize=size, window=window, overlap=overlap))
    covered = np.zeros(size, dtype=int)
    for r in sorted({o[0] for o in plan.origins}):
        covered[r:r + window] += 1
    assert (covered >= 1).all()


# -- merging -----------------------------------------------------------------

def test_merge_constant_tiles():
    plan = plan_tiles(InferConfig(resize=64, window=48, overlap=32))
    v0 = rng.standard_normal((3, 1, 1)) * np.ones((3, 3, 3))
    tiles = [(o, v0.copy()) for o in plan.origins]
    merged = merge_tiles(tiles, plan, patch=16)
    assert merged.shape == (3, 4, 4)
    for o, t in tiles:
        assert np.allclose(merged[:, o[0] // 16:o[0] // 16 + 3,
                                  o[1] // 16:o[1] // 16 + 3], v0)


def test_merge_two_tiles_shared_cell_mean():
    plan = plan_tiles(InferConfig(resize=48, window=32, overlap=16))
    assert plan.origins == [(0, 0), (0, 16), (16, 0), (16, 16)]
    a = np.full((1, 2, 2), 2.0)
    b = np.full((1, 2, 2), 6.0)
    tiles = [((0, 0), a), ((0, 16), b), ((16, 0), a), ((16, 16), b)]
    merged = merge_tiles(tiles, plan, patch=16)
    # column overlap cells average a and b
    assert merged[0, 0, 0] == 2.0
    assert merged[0, 0, 1] == 4.0
    assert merged[0, 0, 2] == 6.0


def test_merge_matches_bruteforce_oracle():
    cfg = InferConfig(resize=128, window=64, overlap=32)
    plan = plan_tiles(cfg)
    tiles = [(o, rng.standard_normal((5, 4, 4))) for o in plan.origins]
    merged = merge_tiles(tiles, plan, patch=16)
    gh = 128 // 16
    for i in range(gh):
        for j in range(gh):
            cover = []
            for (r, c), t in tiles:
                ri, ci = r // 16, c // 16
                if ri <= i < ri + 4 and ci <= j < ci + 4:
                    cover.append(t[:, i - ri, j - ci])
            assert cover, "coverage hole"
            assert np.abs(merged[:, i, j] - np.mean(cover, axis=0)).max() <= 1e-6


def test_merge_rejects_misaligned_origin():
    plan = plan_tiles(InferConfig(resize=64, window=48, overlap=32))
    tiles = [((0, 0), np.zeros((1, 3, 3))), ((8, 0), np.zeros((1, 3, 3)))]
    with pytest.raises(AlignmentError):
        merge_tiles(tiles, plan, patch=16)


# -- aggregation and the full inference path ---------------------------------

def linear_stub(seed=0, channels=32):
    return VisionEncoder(np.random.default_rng(seed), channels=channels,
                         patch=16, depth=0, use_pos_embed=False)


def test_translation_invariant_stub_makes_lga_identity():
    enc = linear_stub()
    img = rng.random((3, 640, 640))
    cfg_on = InferConfig(lga_vlm=True)
    cfg_off = InferConfig(lga_vlm=False)
    on = lga_features(img, enc, cfg_on, patch=16)
    off = lga_features(img, enc, cfg_off, patch=16)
    assert on.shape == (32, 40, 40)
    assert np.array_equal(on, off)  # bitwise


def test_lga_off_is_plain_encode():
    enc = VisionEncoder(np.random.default_rng(3), channels=32, depth=1)
    img = rng.random((3, 640, 640))
    feats = lga_features(img, enc, InferConfig(lga_vlm=False), patch=16)
    _, direct = enc(img)
    assert np.array_equal(feats, direct.data)


def small_model(seed=0, **overrides):
    cfg = ModelConfig(channels=16, spe_channels=8, corr_channels=8, patch=16,
                      vit_depth=1, spe_depth=3, vit_heads=2, refine_heads=2,
                      spatial_window=4, spatial_heads=2, late_stages=1,
                      **overrides)
    return SegModel(cfg, seed=seed)


def test_infer_contract_shapes_and_determinism():
    model = small_model()
    img = rng.random((3, 500, 300))
    cfg = InferConfig(resize=128, window=64, overlap=32)
    res1 = infer(img, model, ["cat", "dog", "grass"], cfg)
    res2 = infer(img, model, ["cat", "dog", "grass"], cfg)
    assert res1.labels.shape == (128, 128)
    assert res1.labels.min() >= 0 and res1.labels.max() < 3
    assert np.array_equal(res1.labels, res2.labels)
    assert np.array_equal(res1.probs, res2.probs)


def test_infer_empty_class_list():
    model = small_model()
    with pytest.raises(ValueError):
        infer(rng.random((3, 64, 64)), model, [], InferConfig(resize=128, window=64, overlap=32))


def test_infer_class_relabeling_permutes_labels():
    model = small_model(seed=5)
    img = rng.random((3, 200, 200))
    cfg = InferConfig(resize=128, window=64, overlap=32)
    names = ["cat", "dog", "grass", "sky"]
    perm = [2, 0, 3, 1]
    res = infer(img, model, names, cfg)
    res_p = infer(img, model, [names[i] for i in perm], cfg)
    # label k in permuted run refers to names[perm[k]]
    relabel = np.empty(4, dtype=int)
    for new_idx, old_idx in enumerate(perm):
        relabel[old_idx] = new_idx
    assert np.array_equal(res_p.labels, relabel[res.labels])


def test_lga_spe_toggle_changes_guidance_path():
    model = small_model(seed=6)
    img = rng.random((3, 256, 256))
    base = infer(img, model, ["a", "b"], InferConfig(resize=128, window=64, overlap=32,
                                                     lga_spe=False))
    tiled = infer(img, model, ["a", "b"], InferConfig(resize=128, window=64, overlap=32,
                                                      lga_spe=True))
    assert base.probs.shape == tiled.probs.shape
    assert not np.array_equal(base.probs, tiled.probs)
