from __future__ import annotations

import math

import numpy as np
import pytest

import oracles
from surfkit.camera import StereoCalib
from surfkit.losses import (
    LossWeights,
    disparity_to_depth,
    dtd_loss,
    occam_regularizer,
    smoothness_loss,
    ssim,
    supervised_loss,
    total_self_loss,
    visibility_mask,
    warp_image,
    warp_loss,
)
from surfkit.optics import WaterParams

CALIB = StereoCalib(fx=800.0, fy=800.0, cx=64.0, cy=48.0, baseline=0.1)
W = LossWeights()


def textured_pair(rng, shape=(32, 48), disparity=4.0):
    """A smooth textured left/right pair consistent with a constant disparity."""
    h, w = shape
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))

    def tex(u, v):
        return np.stack(
            [
                0.5 + 0.4 * np.sin(0.31 * u) * np.cos(0.23 * v),
                0.5 + 0.35 * np.sin(0.17 * u + 0.4 * v * 0.1),
                0.5 + 0.3 * np.cos(0.27 * u - 0.11 * v),
            ],
            axis=-1,
        )

    left = tex(uu, vv)
    right = tex(uu + disparity, vv)  # right view content sits d pixels to the left
    return left, right


def test_disparity_to_depth_frozen():
    d = np.array([[40.0]])
    z = disparity_to_depth(d, CALIB)
    assert z[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_disparity_to_depth_invalid():
    d = np.array([[0.0, -3.0, np.nan, 1e-9]])
    z = disparity_to_depth(d, CALIB)
    assert np.isnan(z).all()


def test_warp_image_integer_shift_exact():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 20, 3))
    disp = np.full((16, 20), 5.0)
    warped, valid = warp_image(img, disp, "to_left")
    np.testing.assert_array_equal(warped[:, 5:], img[:, :-5])
    assert not valid[:, :5].any()
    assert valid[:, 5:].all()
    warped_r, valid_r = warp_image(img, disp, "to_right")
    np.testing.assert_array_equal(warped_r[:, :-5], img[:, 5:])
    assert not valid_r[:, -5:].any()


def test_warp_image_matches_oracle():
    rng = np.random.default_rng(1)
    for direction in ("to_left", "to_right"):
        img = rng.uniform(size=(10, 14, 3))
        disp = rng.uniform(-3.0, 6.0, size=(10, 14))
        disp[0, 0] = np.nan
        got, got_valid = warp_image(img, disp, direction)
        want, want_valid = oracles.oracle_warp_image(img, disp, direction)
        np.testing.assert_array_equal(got_valid, want_valid)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_warp_image_bad_direction():
    with pytest.raises(ValueError):
        warp_image(np.zeros((4, 4)), np.zeros((4, 4)), "sideways")


def test_ssim_identical_is_zero():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(20, 20, 3))
    assert ssim(img, img) == pytest.approx(0.0, abs=1e-12)


def test_ssim_matches_oracle_interior():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(12, 12))
    b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0, 1)
    mask = np.zeros((12, 12), dtype=bool)
    mask[3:-3, 3:-3] = True  # interior only: oracle windows stay inside
    got = ssim(a, b, mask)
    want_map = oracles.oracle_ssim_map(a, b)
    want = want_map[mask].mean()
    assert got == pytest.approx(want, abs=1e-10)


def test_ssim_empty_mask_raises():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8), dtype=bool))


def test_dtd_is_convex_blend_of_l1_and_ssim():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(16, 16, 3))
    b = rng.uniform(size=(16, 16, 3))
    mask = np.ones((16, 16), dtype=bool)
    l1 = float(np.abs(a - b).mean(axis=-1)[mask].mean())
    expected = W.lambda_dtd * l1 + (1 - W.lambda_dtd) * ssim(a, b, mask)
    assert dtd_loss(a, b, mask, W) == pytest.approx(expected, abs=1e-12)


def test_warp_loss_at_true_disparity_is_small():
    rng = np.random.default_rng(5)
    left, right = textured_pair(rng, disparity=4.0)
    disp = np.full(left.shape[:2], 4.0)
    at_truth = warp_loss(left, right, disp, W)
    at_wrong = warp_loss(left, right, disp + 1.5, W)
    assert at_truth < 1e-6
    assert at_wrong > at_truth


def test_warp_loss_single_valid_side_carries_full_weight():
    rng = np.random.default_rng(6)
    left, right = textured_pair(rng, disparity=3.0)
    disp = np.full(left.shape[:2], 3.0)
    none = np.zeros(left.shape[:2], dtype=bool)
    left_only = warp_loss(left, right, disp, W, mask_right=none)
    # the surviving side is counted at full weight, not halved
    synth_l, ok_l = warp_image(right, disp, "to_left")
    synth_l = np.where(ok_l[..., None], synth_l, left)
    assert left_only == pytest.approx(dtd_loss(synth_l, left, ok_l, W), abs=1e-15)
    with pytest.raises(ValueError):
        warp_loss(left, right, disp, W, mask_left=none, mask_right=none)


def test_occam_at_zero_disparity_is_exactly_tau():
    rng = np.random.default_rng(7)
    left, right = textured_pair(rng, disparity=2.0)
    zero = np.zeros(left.shape[:2])
    value = occam_regularizer(left, right, zero, W)
    assert value == W.tau_occam


def test_occam_rewards_beating_the_flat_hypothesis():
    rng = np.random.default_rng(8)
    left, right = textured_pair(rng, disparity=4.0)
    disp = np.full(left.shape[:2], 4.0)
    # the true disparity explains the pair far better than d=0, so the hinge closes
    assert occam_regularizer(left, right, disp, W) == 0.0


def test_smoothness_constant_disparity_is_zero():
    rng = np.random.default_rng(9)
    img = rng.uniform(size=(12, 12, 3))
    assert smoothness_loss(np.full((12, 12), 7.3), img) == 0.0


def test_smoothness_textureless_image_is_mean_gradient():
    rng = np.random.default_rng(10)
    disp = rng.uniform(0.0, 10.0, size=(9, 11))
    img = np.full((9, 11, 3), 0.5)
    expected = np.abs(np.diff(disp, axis=1)).mean() + np.abs(np.diff(disp, axis=0)).mean()
    assert smoothness_loss(disp, img) == pytest.approx(expected, rel=1e-12)


def test_smoothness_matches_oracle():
    rng = np.random.default_rng(11)
    disp = rng.uniform(0.0, 20.0, size=(10, 10))
    img = rng.uniform(size=(10, 10, 3))
    assert smoothness_loss(disp, img) == pytest.approx(
        oracles.oracle_smoothness(disp, img), rel=1e-12
    )


def test_visibility_mask_boundary():
    beta = 0.5
    water = WaterParams(beta=(beta, beta, beta), b_inf=(0.0, 0.0, 0.0))
    z_star = math.log(1.0 / 0.05) / beta  # transmission hits t_min here
    depth = np.linspace(z_star - 1.0, z_star + 1.0, 201)[None, :]
    mask = visibility_mask(water, depth, 0.05)
    flip = np.nonzero(~mask[0])[0][0]
    assert depth[0, flip - 1] <= z_star <= depth[0, flip] + 1e-9


def test_visibility_mask_properties():
    rng = np.random.default_rng(12)
    depth = rng.uniform(0.5, 30.0, size=(8, 8))
    depth[0, 0] = np.nan
    water = WaterParams(beta=(0.2, 0.3, 0.4), b_inf=(0.0, 0.0, 0.0))
    mask = visibility_mask(water, depth, 0.0)
    assert not mask[0, 0]
    assert mask[np.isfinite(depth)].all()
    got = visibility_mask(water, depth, 0.05)
    want = oracles.oracle_visibility_mask(depth, water.beta, 0.05)
    np.testing.assert_array_equal(got, want)


def test_visibility_mask_per_channel_t_min():
    water = WaterParams(beta=(0.5, 0.1, 0.1), b_inf=(0.0, 0.0, 0.0))
    depth = np.array([[4.0]])
    # red channel transmission exp(-2) ~ 0.135 fails a red-only threshold of 0.2
    assert not visibility_mask(water, depth, (0.2, 0.01, 0.01))[0, 0]
    assert visibility_mask(water, depth, (0.1, 0.01, 0.01))[0, 0]


def test_supervised_loss_frozen_values():
    gt = np.full((6, 6), 10.0)
    exact = [gt.copy()]
    assert supervised_loss(exact, gt, W) == 0.0
    # final prediction off by 0.5 -> smooth-L1 = 0.125; one refinement off by 2 -> L1 = 2
    preds = [gt + 0.5, gt + 2.0]
    assert supervised_loss(preds, gt, W) == pytest.approx(0.125 + 2.0, abs=1e-12)
    # two refinements: weights gamma^1 and gamma^0
    preds = [gt + 0.5, gt + 1.0, gt + 2.0]
    expected = 0.125 + W.gamma * 1.0 + 1.0 * 2.0
    assert supervised_loss(preds, gt, W) == pytest.approx(expected, abs=1e-12)


def test_supervised_loss_ignores_invalid_gt():
    gt = np.full((4, 4), 5.0)
    gt[0, 0] = np.nan
    pred = np.full((4, 4), 5.0)
    pred[0, 0] = 100.0  # sits on an invalid pixel, must not count
    assert supervised_loss([pred], gt, W) == 0.0
    with pytest.raises(ValueError):
        supervised_loss([], gt, W)


def test_total_self_loss_breakdown_sums_exactly():
    rng = np.random.default_rng(13)
    left, right = textured_pair(rng, disparity=3.0)
    disp = np.full(left.shape[:2], 3.0) + rng.normal(scale=0.3, size=left.shape[:2])
    total, breakdown = total_self_loss(left, right, disp, W)
    assert total == breakdown["warp"] + breakdown["occam"] + breakdown["smooth"]
    assert set(breakdown) == {"warp", "occam", "smooth"}
    assert total >= 0.0
