"""Slow, per-pixel reference implementations used to check the vectorized ops.

Everything here is deliberately written with plain python loops and scalar
math so it shares no code path with the package implementations.
"""

from __future__ import annotations

import math

import numpy as np


def oracle_transmission(depth, beta):
    h, w = depth.shape
    out = np.empty((h, w, 3))
    for i in range(h):
        for j in range(w):
            z = depth[i, j]
            for c in range(3):
                out[i, j, c] = math.exp(-beta[c] * z) if not math.isnan(z) else math.nan
    return out


def oracle_water_column(image, depth, beta, b_inf):
    h, w = depth.shape
    out = np.empty((h, w, 3))
    for i in range(h):
        for j in range(w):
            z = depth[i, j]
            for c in range(3):
                t = 0.0 if math.isnan(z) else math.exp(-beta[c] * z)
                v = image[i, j, c] * t + b_inf[c] * (1.0 - t)
                out[i, j, c] = min(1.0, max(0.0, v))
    return out


def oracle_normals(depth, fx, fy, cx, cy):
    h, w = depth.shape
    pts = np.empty((h, w, 3))
    for i in range(h):
        for j in range(w):
            z = depth[i, j]
            pts[i, j] = ((j - cx) / fx * z, (i - cy) / fy * z, z)

    def grad(get, i, j, axis_len, along_rows):
        # replicate numpy.gradient: central interior, one-sided at borders
        if along_rows:
            if i == 0:
                return get(1, j) - get(0, j)
            if i == axis_len - 1:
                return get(i, j) - get(i - 1, j)
            return (get(i + 1, j) - get(i - 1, j)) / 2.0
        if j == 0:
            return get(i, 1) - get(i, 0)
        if j == axis_len - 1:
            return get(i, j) - get(i, j - 1)
        return (get(i, j + 1) - get(i, j - 1)) / 2.0

    out = np.empty((h, w, 3))
    for i in range(h):
        for j in range(w):
            dv = grad(lambda a, b: pts[a, b], i, j, h, True)
            du = grad(lambda a, b: pts[a, b], i, j, w, False)
            n = np.cross(du, dv)
            nn = math.sqrt(float(n @ n))
            if not np.isfinite(nn) or nn < 1e-12:
                out[i, j] = np.nan
                continue
            n = n / nn
            ray = np.array([(j - cx) / fx, (i - cy) / fy, 1.0])
            if float(n @ ray) > 0.0:
                n = -n
            out[i, j] = n
    return out


def oracle_caustics(texture, normals, light_dir):
    d = np.asarray(light_dir, dtype=float)
    d = d / math.sqrt(float(d @ d))
    h, w = texture.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            lam = float(normals[i, j] @ d)
            if math.isnan(lam) or lam < 0.0:
                lam = 0.0
            out[i, j] = texture[i, j] * lam
    return out


def oracle_point_light(depth, normals, fx, fy, cx, cy, position, power, color, beta):
    h, w = depth.shape
    out = np.zeros((h, w, 3))
    p = np.asarray(position, dtype=float)
    for i in range(h):
        for j in range(w):
            z = depth[i, j]
            if math.isnan(z):
                continue
            x = np.array([(j - cx) / fx * z, (i - cy) / fy * z, z])
            lvec = p - x
            dist = math.sqrt(float(lvec @ lvec))
            if dist <= 1e-6:
                continue
            lam = float((lvec / dist) @ normals[i, j])
            if math.isnan(lam) or lam < 0.0:
                lam = 0.0
            for c in range(3):
                out[i, j, c] = power * color[c] / dist**2 * lam * math.exp(-beta[c] * dist)
    return out


def oracle_sunlight(image, mode, color, brightness, sat_distance, center, beta, b_inf):
    h, w = image.shape[:2]
    out = np.empty_like(image)
    tint = [color[c] * (math.exp(-beta[c]) + b_inf[c] * (1.0 - math.exp(-beta[c]))) for c in range(3)]
    for i in range(h):
        for j in range(w):
            if mode == "planar":
                g = min(1.0, max(0.0, 1.0 - i / sat_distance))
            else:
                r = math.hypot(j - center[0], i - center[1])
                g = min(1.0, max(0.0, 1.0 - r / sat_distance))
            for c in range(3):
                out[i, j, c] = min(1.0, max(0.0, image[i, j, c] + brightness * g * tint[c]))
    return out


def oracle_warp_image(image, disparity, direction):
    h, w = disparity.shape
    color = image.ndim == 3
    warped = np.zeros_like(image, dtype=float)
    valid = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            d = disparity[i, j]
            if math.isnan(d) or math.isinf(d):
                continue
            u = j - d if direction == "to_left" else j + d
            if u < 0.0 or u > w - 1.0:
                continue
            x0 = min(int(math.floor(u)), w - 2)
            f = u - x0
            valid[i, j] = True
            if color:
                for c in range(3):
                    warped[i, j, c] = image[i, x0, c] * (1 - f) + image[i, x0 + 1, c] * f
            else:
                warped[i, j] = image[i, x0] * (1 - f) + image[i, x0 + 1] * f
    return warped, valid


def _reflect(i, n):
    # scipy.ndimage 'reflect' boundary: (d c b a | a b c d | d c b a)
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        if i >= n:
            i = 2 * n - i - 1
    return i


def oracle_ssim_map(a, b, window=7, c1=0.01**2, c2=0.03**2):
    """Per-pixel (1 - SSIM)/2 for a single-channel pair, reflect boundary."""
    h, w = a.shape
    half = window // 2
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            va = []
            vb = []
            for di in range(-half, half + 1):
                for dj in range(-half, half + 1):
                    ii = _reflect(i + di, h)
                    jj = _reflect(j + dj, w)
                    va.append(a[ii, jj])
                    vb.append(b[ii, jj])
            va = np.array(va)
            vb = np.array(vb)
            mu_a = va.mean()
            mu_b = vb.mean()
            var_a = (va * va).mean() - mu_a**2
            var_b = (vb * vb).mean() - mu_b**2
            cov = (va * vb).mean() - mu_a * mu_b
            s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
                (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            )
            out[i, j] = min(1.0, max(0.0, (1.0 - s) / 2.0))
    return out


def oracle_visibility_mask(depth, beta, t_min):
    h, w = depth.shape
    t_min = np.broadcast_to(np.asarray(t_min, dtype=float), (3,))
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            z = depth[i, j]
            if not np.isfinite(z):
                continue
            out[i, j] = all(math.exp(-beta[c] * z) >= t_min[c] for c in range(3))
    return out


def oracle_smoothness(disparity, image):
    h, w = disparity.shape
    img = image if image.ndim == 3 else image[..., None]
    xs = []
    ys = []
    for i in range(h):
        for j in range(w - 1):
            gd = abs(disparity[i, j + 1] - disparity[i, j])
            gi = np.abs(img[i, j + 1] - img[i, j]).mean()
            xs.append(gd * math.exp(-gi))
    for i in range(h - 1):
        for j in range(w):
            gd = abs(disparity[i + 1, j] - disparity[i, j])
            gi = np.abs(img[i + 1, j] - img[i, j]).mean()
            ys.append(gd * math.exp(-gi))
    return float(np.nanmean(xs) + np.nanmean(ys))
