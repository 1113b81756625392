import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovseg.autodiff import Tensor, numeric_grad
from ovseg.config import LossConfig, preset
from ovseg.errors import ShapeError
from ovseg.losses import combined_loss, dice_loss, focal_loss, one_hot_targets

rng = np.random.default_rng(51)


def test_focal_half_prediction_value():
    # gamma=2, p=0.5, y=1: per-pixel (1-0.5)^2 * ln 2 = 0.25 ln 2
    pred = np.full((1, 4, 4), 0.5)
    target = np.ones((1, 4, 4))
    val = focal_loss(pred, target, gamma=2.0).item()
    assert abs(val - 0.25 * np.log(2.0)) < 1e-9


def test_focal_gamma_zero_is_bce():
    pred = rng.uniform(0.05, 0.95, size=(3, 8, 8))
    target = (rng.random((3, 8, 8)) > 0.5).astype(float)
    got = focal_loss(pred, target, gamma=0.0).item()
    bce = -np.mean(target * np.log(pred) + (1 - target) * np.log(1 - pred))
    assert abs(got - bce) < 1e-10


def test_focal_perfect_prediction_tends_to_zero():
    target = (rng.random((2, 6, 6)) > 0.5).astype(float)
    val = focal_loss(target.copy(), target, gamma=2.0).item()
    assert 0 <= val < 1e-5


def test_focal_nonnegative_and_shape_check():
    with pytest.raises(ShapeError):
        focal_loss(np.full((1, 2, 2), 0.5), np.ones((1, 2, 3)))
    pred = rng.uniform(0.01, 0.99, size=(2, 5, 5))
    target = (rng.random((2, 5, 5)) > 0.3).astype(float)
    assert focal_loss(pred, target, 2.0).item() >= 0


def test_dice_hand_case():
    # pred=[0.5,0.5], target=[1,0]: 1 - 2*0.5/(1+1) = 0.5
    pred = np.array([[[0.5, 0.5]]])
    target = np.array([[[1.0, 0.0]]])
    assert abs(dice_loss(pred, target).item() - 0.5) < 1e-6


def test_dice_perfect_and_empty():
    target = (rng.random((2, 6, 6)) > 0.5).astype(float)
    assert abs(dice_loss(target.copy(), target).item()) < 1e-6
    both_zero = np.zeros((1, 4, 4))
    val = dice_loss(both_zero, both_zero).item()
    assert np.isfinite(val) and abs(val) < 1e-12


def test_dice_symmetric_in_soft_inputs():
    a = rng.uniform(0, 1, size=(2, 5, 5))
    b = rng.uniform(0, 1, size=(2, 5, 5))
    assert abs(dice_loss(a, b).item() - dice_loss(b, a).item()) < 1e-12


def test_dice_monotone_where_target_one():
    pred = rng.uniform(0.1, 0.8, size=(1, 4, 4))
    target = np.ones((1, 4, 4))
    base = dice_loss(pred, target).item()
    bumped = pred.copy()
    bumped[0, 2, 2] += 0.1
    assert dice_loss(bumped, target).item() <= base


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_dice_in_unit_interval(p, q):
    pred = np.full((1, 3, 3), p)
    target = np.full((1, 3, 3), round(q))
    val = dice_loss(pred, target).item()
    assert -1e-9 <= val <= 1.0 + 1e-9


def test_combined_lambda_zero_is_focal_bitwise():
    pred = rng.uniform(0.1, 0.9, size=(2, 4, 4))
    target = (rng.random((2, 4, 4)) > 0.5).astype(float)
    cfg = LossConfig(lam=0.0, gamma=2.0)
    assert combined_loss(pred, target, cfg).item() == focal_loss(pred, target, 2.0).item()


def test_combined_affine_in_lambda():
    pred = rng.uniform(0.1, 0.9, size=(2, 4, 4))
    target = (rng.random((2, 4, 4)) > 0.5).astype(float)

    def at(lam):
        return combined_loss(pred, target, LossConfig(lam=lam, gamma=2.0)).item()

    l1, l2 = 0.03, 0.4
    gap = at(l1) + at(l2) - 2 * at((l1 + l2) / 2)
    assert abs(gap) < 1e-12


def test_paper_preset_defaults():
    cfg = preset("paper")
    assert cfg.train.loss.lam == 0.05
    assert cfg.train.loss.gamma == 2.0


def test_gradients_vs_central_difference():
    pred = rng.uniform(0.2, 0.8, size=(1, 4, 4))
    target = (rng.random((1, 4, 4)) > 0.5).astype(float)

    for fn in (lambda p: focal_loss(p, target, 2.0),
               lambda p: dice_loss(p, target),
               lambda p: combined_loss(p, target, LossConfig())):
        t = Tensor(pred.copy(), requires_grad=True)
        fn(t).backward()
        num = numeric_grad(lambda a: fn(Tensor(a)).item(), pred.copy())
        rel = np.abs(t.grad - num).max() / max(np.abs(num).max(), 1e-12)
        assert rel <= 1e-6


def test_one_hot_targets():
    mask = np.array([[0, 1], [2, 1]])
    oh = one_hot_targets(mask, 3)
    assert oh.shape == (3, 2, 2)
    assert np.array_equal(oh.sum(axis=0), np.ones((2, 2)))
    assert oh[1, 0, 1] == 1 and oh[1, 1, 1] == 1
