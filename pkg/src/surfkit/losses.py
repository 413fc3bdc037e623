"""Stereo training losses for turbidity-robust disparity estimation.

Disparities are (H, W) float rasters in pixels, defined in the left view with
the right camera at +baseline along x (so matching right column = u - d).
Losses return python floats; masks are boolean rasters where True = counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .camera import StereoCalib
from .optics import WaterParams

_SSIM_WINDOW = 7
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    """Weights and constants of the stereo training objective."""

    lambda_warp: float = 10.0
    lambda_occam: float = 1.0
    tau_occam: float = 0.01
    lambda_smooth: float = 0.005
    lambda_dtd: float = 0.15
    gamma: float = 0.9
    lambda_self: float = 1.0
    t_min: float = 0.05


def disparity_to_depth(disparity: np.ndarray, calib: StereoCalib, eps: float = 1e-6) -> np.ndarray:
    """Invert d = fx * baseline / z; disparities <= eps (or NaN) give NaN depth."""
    disparity = np.asarray(disparity, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = calib.fx * calib.baseline / disparity
    bad = ~np.isfinite(disparity) | (disparity <= eps)
    return np.where(bad, np.nan, depth)


def warp_image(image: np.ndarray, disparity: np.ndarray, direction: str):
    """Synthesize the opposite view by horizontal bilinear resampling.

    Args:
        image: source image, (H, W) or (H, W, 3).
        disparity: (H, W) disparity raster aligned with the *destination* view.
        direction: 'to_left' samples the (right) source at u - d; 'to_right'
            samples the (left) source at u + d.

    Returns:
        (warped, valid) where valid marks pixels whose source coordinate lies
        inside the image and whose disparity is finite.
    """
    image = np.asarray(image, dtype=float)
    disparity = np.asarray(disparity, dtype=float)
    if direction not in ("to_left", "to_right"):
        raise ValueError(f"warp_image: bad direction {direction!r}")
    h, w = disparity.shape
    if image.shape[:2] != (h, w):
        raise ValueError("warp_image: image and disparity shapes disagree")
    uu = np.arange(w, dtype=float)[None, :]
    u_src = uu - disparity if direction == "to_left" else uu + disparity
    valid = np.isfinite(u_src) & (u_src >= 0.0) & (u_src <= w - 1.0)
    u_safe = np.where(valid, u_src, 0.0)
    x0 = np.clip(np.floor(u_safe), 0, w - 2).astype(int)
    frac = u_safe - x0
    rows = np.arange(h)[:, None]
    if image.ndim == 3:
        frac = frac[..., None]
    warped = image[rows, x0] * (1.0 - frac) + image[rows, x0 + 1] * frac
    if image.ndim == 3:
        warped = np.where(valid[..., None], warped, 0.0)
    else:
        warped = np.where(valid, warped, 0.0)
    return warped, valid


def _masked_mean(values: np.ndarray, mask: np.ndarray, what: str) -> float:
    if values.ndim == 3:
        values = values.mean(axis=-1)
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ValueError(f"{what}: mask selects no pixels")
    return float(values[mask].mean())


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Structural dissimilarity (1 - SSIM)/2 in [0, 1], averaged over the mask.

    Uses a 7x7 uniform window with the standard stabilizers c1 = 0.01^2 and
    c2 = 0.03^2, computed per channel and averaged.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("ssim: shapes disagree")
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)

    def filt(x):
        if x.ndim == 3:
            return uniform_filter(x, size=(_SSIM_WINDOW, _SSIM_WINDOW, 1))
        return uniform_filter(x, size=_SSIM_WINDOW)

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    dissim = np.clip((1.0 - num / den) / 2.0, 0.0, 1.0)
    return _masked_mean(dissim, mask, "ssim")


def dtd_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, weights: LossWeights) -> float:
    """Photometric distance: lambda_dtd * L1 + (1 - lambda_dtd) * SSIM dissimilarity."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    l1 = _masked_mean(np.abs(pred - target), mask, "dtd_loss")
    return weights.lambda_dtd * l1 + (1.0 - weights.lambda_dtd) * ssim(pred, target, mask)


def warp_loss(
    left: np.ndarray,
    right: np.ndarray,
    disparity: np.ndarray,
    weights: LossWeights,
    mask_left: np.ndarray | None = None,
    mask_right: np.ndarray | None = None,
) -> float:
    """Symmetric reconstruction loss from cross-warping the pair.

    Each view is synthesized from the other through the disparity and compared
    with the photometric distance. Invalid synth pixels are filled with the
    target so SSIM windows straddling the mask boundary see no artificial
    contrast (a perfect disparity scores exactly 0). If one direction has no
    valid pixels the other side carries the full weight; if neither does,
    raises ValueError.
    """
    disparity = np.asarray(disparity, dtype=float)
    h, w = disparity.shape
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if mask_left is None:
        mask_left = np.ones((h, w), dtype=bool)
    if mask_right is None:
        mask_right = np.ones((h, w), dtype=bool)
    synth_l, ok_l = warp_image(right, disparity, "to_left")
    synth_r, ok_r = warp_image(left, disparity, "to_right")
    valid_l = ok_l & mask_left
    valid_r = ok_r & mask_right
    fill_l = valid_l[..., None] if left.ndim == 3 else valid_l
    fill_r = valid_r[..., None] if right.ndim == 3 else valid_r
    synth_l = np.where(fill_l, synth_l, left)
    synth_r = np.where(fill_r, synth_r, right)
    have_l = bool(valid_l.any())
    have_r = bool(valid_r.any())
    if not have_l and not have_r:
        raise ValueError("warp_loss: no valid pixels in either direction")
    if have_l and have_r:
        return 0.5 * (
            dtd_loss(synth_l, left, valid_l, weights) + dtd_loss(synth_r, right, valid_r, weights)
        )
    if have_l:
        return dtd_loss(synth_l, left, valid_l, weights)
    return dtd_loss(synth_r, right, valid_r, weights)


def occam_regularizer(
    left: np.ndarray,
    right: np.ndarray,
    disparity: np.ndarray,
    weights: LossWeights,
    mask_left: np.ndarray | None = None,
    mask_right: np.ndarray | None = None,
    warp_value: float | None = None,
) -> float:
    """Penalty for explaining the pair better than zero disparity would.

    Computes max(0, tau + L_warp(d) - L_warp(0)): structure is only accepted
    where it beats the featureless (all-water) hypothesis by the margin tau.
    At d = 0 the two warp terms cancel exactly, giving precisely tau.
    """
    if warp_value is None:
        warp_value = warp_loss(left, right, disparity, weights, mask_left, mask_right)
    zero = np.zeros_like(np.asarray(disparity, dtype=float))
    warp_zero = warp_loss(left, right, zero, weights, mask_left, mask_right)
    delta = warp_value - warp_zero  # difference first: at d=0 this is exactly 0
    return max(0.0, weights.tau_occam + delta)


def smoothness_loss(disparity: np.ndarray, image: np.ndarray) -> float:
    """Edge-aware first-order smoothness: |grad d| weighted by exp(-|grad I|).

    Image gradients are averaged over channels; NaN disparity gradients are
    excluded from the mean. A constant disparity scores exactly 0.
    """
    d = np.asarray(disparity, dtype=float)
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    dx_d = np.abs(d[:, 1:] - d[:, :-1])
    dy_d = np.abs(d[1:, :] - d[:-1, :])
    dx_i = np.abs(img[:, 1:] - img[:, :-1]).mean(axis=-1)
    dy_i = np.abs(img[1:, :] - img[:-1, :]).mean(axis=-1)
    with np.errstate(invalid="ignore"):
        tx = np.nanmean(dx_d * np.exp(-dx_i))
        ty = np.nanmean(dy_d * np.exp(-dy_i))
    return float(tx + ty)


def visibility_mask(water: WaterParams, depth: np.ndarray, t_min) -> np.ndarray:
    """True where transmission stays above t_min in every channel.

    t_min may be a scalar or per-channel triple. NaN depth is masked out.
    """
    depth = np.asarray(depth, dtype=float)
    beta = np.asarray(water.beta, dtype=float)
    t = np.exp(-depth[..., None] * beta)
    t_min = np.broadcast_to(np.asarray(t_min, dtype=float), (3,))
    with np.errstate(invalid="ignore"):
        ok = t >= t_min
    return np.all(ok, axis=-1) & np.isfinite(depth)


def _smooth_l1(err: np.ndarray) -> np.ndarray:
    a = np.abs(err)
    return np.where(a < 1.0, 0.5 * a * a, a - 0.5)


def supervised_loss(
    preds,
    gt: np.ndarray,
    weights: LossWeights,
    valid_mask: np.ndarray | None = None,
) -> float:
    """Supervised disparity loss over a refinement sequence.

    preds[0] is the final output, scored with smooth-L1 (1 px transition);
    preds[1..R] are intermediate refinements scored with L1 and geometrically
    decaying weights gamma^(R-r), so the last refinement counts most. Pixels
    where gt is NaN or the mask is False are ignored.
    """
    if len(preds) == 0:
        raise ValueError("supervised_loss: need at least one prediction")
    gt = np.asarray(gt, dtype=float)
    base = np.isfinite(gt)
    if valid_mask is not None:
        base = base & valid_mask
    total = _masked_mean(_smooth_l1(np.asarray(preds[0], dtype=float) - gt), base, "supervised_loss")
    n_refine = len(preds) - 1
    for r in range(1, len(preds)):
        w = weights.gamma ** (n_refine - r)
        total += w * _masked_mean(np.abs(np.asarray(preds[r], dtype=float) - gt), base, "supervised_loss")
    return float(total)


def total_self_loss(
    left: np.ndarray,
    right: np.ndarray,
    disparity: np.ndarray,
    weights: LossWeights,
    mask_left: np.ndarray | None = None,
    mask_right: np.ndarray | None = None,
):
    """Self-supervised objective with its per-term breakdown.

    Returns (total, breakdown) where breakdown holds the weighted
    contributions {"warp", "occam", "smooth"} that sum exactly to total.
    """
    lw = warp_loss(left, right, disparity, weights, mask_left, mask_right)
    lo = occam_regularizer(left, right, disparity, weights, mask_left, mask_right, warp_value=lw)
    ls = smoothness_loss(disparity, left)
    breakdown = {
        "warp": weights.lambda_warp * lw,
        "occam": weights.lambda_occam * lo,
        "smooth": weights.lambda_smooth * ls,
    }
    total = breakdown["warp"] + breakdown["occam"] + breakdown["smooth"]
    return total, breakdown
