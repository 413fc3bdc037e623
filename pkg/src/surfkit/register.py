"""Geometric validation of loop-closure candidates.

2D feature matches are lifted to 3D with the two keyframes' depth maps, a
rigid transform is estimated by 3-point RANSAC, and the estimate is refined
with plane-to-plane (generalized) ICP over the full clouds. The returned
transform maps match-frame points into the query frame, i.e. it is the pose
of the match camera expressed in the query camera. Every stage can reject;
rejections carry a reason and are distinct from programming errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics
from .geom import Pose, se3_adjoint, se3_exp, umeyama_align


class RegistrationRejected(Exception):
    """A candidate failed a validation stage (not a crash)."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass
class RegisterConfig:
    inlier_threshold: float = 0.05  # m, RANSAC Euclidean gate
    confidence: float = 0.999  # adaptive RANSAC stopping probability
    min_inliers: int = 12
    max_ransac_iters: int = 1000
    seed: int = 0
    gicp_neighbors: int = 20
    gicp_epsilon: float = 1e-3  # small axis of the disk-like covariances
    gicp_max_iters: int = 40
    gicp_tolerance: float = 1e-6  # step-norm convergence threshold
    nn_cutoff: float = 0.5  # m, association radius during refinement
    degeneracy_ratio: float = 2e-3  # min/max eigenvalue of the GN Hessian
    min_cloud_size: int = 30
    cloud_stride: int = 1  # depth-raster subsampling when building clouds
    cov_floor: float = 1e-8  # eigenvalue floor of the reported covariance

    def to_dict(self) -> dict:
        return {
            "inlier_threshold": self.inlier_threshold,
            "confidence": self.confidence,
            "min_inliers": self.min_inliers,
            "max_ransac_iters": self.max_ransac_iters,
            "seed": self.seed,
            "gicp_neighbors": self.gicp_neighbors,
            "gicp_epsilon": self.gicp_epsilon,
            "gicp_max_iters": self.gicp_max_iters,
            "gicp_tolerance": self.gicp_tolerance,
            "nn_cutoff": self.nn_cutoff,
            "degeneracy_ratio": self.degeneracy_ratio,
            "min_cloud_size": self.min_cloud_size,
            "cloud_stride": self.cloud_stride,
            "cov_floor": self.cov_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegisterConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class Correspondences:
    """Paired 3D points in the query and match camera frames."""

    point_q: np.ndarray  # (N, 3)
    point_m: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return self.point_q.shape[0]


@dataclass
class RegistrationResult:
    transform: Pose  # match-frame points -> query frame
    inlier_count: int
    inlier_ratio: float
    rms: float  # m, Euclidean alignment error over inliers
    converged: bool
    covariance: np.ndarray | None = None  # 6x6 Laplace estimate (rot, trans)
    objective_history: list = field(default_factory=list)


def lift_correspondences(matches_2d, depth_q, depth_m, intrinsics: CameraIntrinsics) -> Correspondences:
    """Back-project pixel matches through the two depth maps.

    matches_2d is an (N, 2, 2) array-like of ((u_q, v_q), (u_m, v_m)) pixel
    pairs. Pairs falling outside either raster or hitting an invalid
    (non-finite or non-positive) depth are dropped, never fabricated.
    """
    matches = np.asarray(matches_2d, dtype=float).reshape(-1, 2, 2)
    depth_q = np.asarray(depth_q, dtype=float)
    depth_m = np.asarray(depth_m, dtype=float)
    if matches.shape[0] == 0:
        return Correspondences(np.empty((0, 3)), np.empty((0, 3)))

    def sample(depth, uv):
        h, w = depth.shape
        col = np.rint(uv[:, 0]).astype(int)
        row = np.rint(uv[:, 1]).astype(int)
        ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        z = np.full(uv.shape[0], np.nan)
        z[ok] = depth[row[ok], col[ok]]
        return z

    z_q = sample(depth_q, matches[:, 0])
    z_m = sample(depth_m, matches[:, 1])
    keep = np.isfinite(z_q) & (z_q > 0) & np.isfinite(z_m) & (z_m > 0)
    keep &= np.isfinite(matches).all(axis=(1, 2))

    def backproject(uv, z):
        x = (uv[:, 0] - intrinsics.cx) / intrinsics.fx * z
        y = (uv[:, 1] - intrinsics.cy) / intrinsics.fy * z
        return np.stack([x, y, z], axis=1)

    return Correspondences(
        backproject(matches[keep, 0], z_q[keep]),
        backproject(matches[keep, 1], z_m[keep]),
    )


def estimate_rigid_ransac(corr: Correspondences, config: RegisterConfig | None = None) -> RegistrationResult:
    """3-point RANSAC over lifted correspondences, refit on the best inlier set."""
    config = config or RegisterConfig()
    pq, pm = corr.point_q, corr.point_m
    n = len(corr)
    if n < 3:
        raise RegistrationRejected("insufficient-correspondences", f"{n} < 3")

    rng = np.random.default_rng(config.seed)
    best_mask = None
    best_count = 0
    needed = config.max_ransac_iters
    it = 0
    while it < needed:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        try:
            model, _ = umeyama_align(pm[idx], pq[idx])
        except ValueError:
            continue  # collinear minimal sample
        err = np.linalg.norm(pq - model.apply(pm), axis=1)
        mask = err <= config.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            w3 = (count / n) ** 3
            if w3 >= 1.0 - 1e-12:
                break
            needed = min(
                config.max_ransac_iters,
                math.ceil(math.log(1.0 - config.confidence) / math.log(1.0 - w3)),
            )

    if best_count < max(3, config.min_inliers):
        raise RegistrationRejected("insufficient-inliers", f"{best_count} < {config.min_inliers}")

    refined, _ = umeyama_align(pm[best_mask], pq[best_mask])
    err = np.linalg.norm(pq - refined.apply(pm), axis=1)
    mask = err <= config.inlier_threshold
    count = int(mask.sum())
    if count < max(3, config.min_inliers):
        raise RegistrationRejected("insufficient-inliers", f"{count} after refit")
    rms = float(np.sqrt(np.mean(err[mask] ** 2)))
    return RegistrationResult(refined, count, count / n, rms, converged=True)


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _disk_covariances(points: np.ndarray, k: int, epsilon: float) -> np.ndarray:
    """Per-point neighborhood covariances regularized to (ε, 1, 1) disks."""
    k = min(k, points.shape[0])
    _, idx = cKDTree(points).query(points, k=k)
    nb = points[idx]  # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.swapaxes(centered, 1, 2) @ centered / k
    vals, vecs = np.linalg.eigh(cov)  # ascending: the smallest axis is the normal
    disk = np.array([epsilon, 1.0, 1.0])
    return (vecs * disk[None, None, :]) @ np.swapaxes(vecs, 1, 2)


def _finite_points(cloud: np.ndarray) -> np.ndarray:
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    return pts[np.isfinite(pts).all(axis=1)]


def gicp_refine(src: np.ndarray, dst: np.ndarray, initial: Pose, config: RegisterConfig | None = None) -> RegistrationResult:
    """Plane-to-plane ICP aligning src onto dst, warm-started at `initial`.

    Each iteration re-associates nearest neighbors under the current
    transform (pairs beyond nn_cutoff dropped), then takes a backtracked
    Gauss-Newton step on SE(3) with the pair covariances held fixed, so the
    per-iteration objective never increases on its own association set.
    """
    config = config or RegisterConfig()
    src = _finite_points(src)
    dst = _finite_points(dst)
    if src.shape[0] < config.min_cloud_size or dst.shape[0] < config.min_cloud_size:
        raise ValueError(f"gicp_refine: clouds must have at least {config.min_cloud_size} points")
    if not np.isfinite(initial.as_matrix()).all():
        raise ValueError("gicp_refine: initial transform must be finite")

    cov_src = _disk_covariances(src, config.gicp_neighbors, config.gicp_epsilon)
    cov_dst = _disk_covariances(dst, config.gicp_neighbors, config.gicp_epsilon)
    tree = cKDTree(dst)

    transform = Pose(initial.rotation, initial.translation)
    history = []
    converged = False
    hessian = None
    pair_count = 0
    for _ in range(config.gicp_max_iters):
        moved = transform.apply(src)
        dist, nn = tree.query(moved, distance_upper_bound=config.nn_cutoff)
        valid = np.isfinite(dist)
        pair_count = int(valid.sum())
        if pair_count < 6:
            break
        a = src[valid]
        b = dst[nn[valid]]
        rot = transform.rotation.as_matrix()
        pair_cov = cov_dst[nn[valid]] + rot @ cov_src[valid] @ rot.T
        info = np.linalg.inv(pair_cov)

        moved_a = moved[valid]
        resid = b - moved_a
        cost0 = float(np.einsum("ni,nij,nj->", resid, info, resid))

        j_phi = _skew_batch(moved_a)  # d(residual)/d(rotation increment)
        info_jphi = info @ j_phi
        h = np.zeros((6, 6))
        h[0:3, 0:3] = np.einsum("nij,nik->jk", j_phi, info_jphi)
        h[0:3, 3:6] = -np.einsum("nij,nik->jk", j_phi, info)
        h[3:6, 0:3] = h[0:3, 3:6].T
        h[3:6, 3:6] = info.sum(axis=0)
        g = np.zeros(6)
        info_r = np.einsum("nij,nj->ni", info, resid)
        g[0:3] = np.einsum("nij,ni->j", j_phi, info_r)
        g[3:6] = -info_r.sum(axis=0)

        # a plane-only (or otherwise rank-deficient) geometry leaves some
        # transform direction supported only by the ε disk axis: reject it.
        # Conditioning is judged about the cloud centroid so the verdict does
        # not depend on where the clouds sit relative to the frame origin.
        centroid = np.eye(6)
        centroid[3:6, 0:3] = _skew_batch(moved_a.mean(axis=0))
        h_centered = centroid.T @ h @ centroid
        eigvals = np.linalg.eigvalsh(h_centered)
        if eigvals[0] <= config.degeneracy_ratio * eigvals[-1]:
            converged = False
            hessian = None
            break

        try:
            delta = np.linalg.solve(h + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            break
        if not np.isfinite(delta).all():
            break
        hessian = h

        step = 1.0
        accepted = False
        for _ in range(8):
            candidate = se3_exp(step * delta) @ transform
            resid_try = b - candidate.apply(a)
            cost_try = float(np.einsum("ni,nij,nj->", resid_try, info, resid_try))
            if cost_try <= cost0:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = np.linalg.norm(delta) < 10 * config.gicp_tolerance
            break
        history.append((cost0, cost_try))
        transform = candidate
        if np.linalg.norm(step * delta) < config.gicp_tolerance:
            converged = True
            break

    moved = transform.apply(src)
    dist, nn = tree.query(moved, distance_upper_bound=config.nn_cutoff)
    valid = np.isfinite(dist)
    rms = float(np.sqrt(np.mean(dist[valid] ** 2))) if valid.any() else float("inf")

    covariance = None
    if hessian is not None:
        try:
            cov = np.linalg.inv(hessian)
            # express in the tangent at the estimate (right perturbation), the
            # frame the pose-graph residual Log(T̃⁻¹ T̄) lives in
            adj_inv = np.linalg.inv(se3_adjoint(transform))
            cov = adj_inv @ cov @ adj_inv.T
            cov = 0.5 * (cov + cov.T)
            vals, vecs = np.linalg.eigh(cov)
            covariance = (vecs * np.maximum(vals, config.cov_floor)) @ vecs.T
        except np.linalg.LinAlgError:
            converged = False

    return RegistrationResult(
        transform,
        int(valid.sum()),
        float(valid.sum() / max(src.shape[0], 1)),
        rms,
        bool(converged),
        covariance,
        history,
    )


def cloud_from_depth(depth: np.ndarray, intrinsics: CameraIntrinsics, stride: int = 1) -> np.ndarray:
    """Finite camera-frame points of a z-depth raster, optionally strided."""
    depth = np.asarray(depth, dtype=float)[::stride, ::stride]
    sub = CameraIntrinsics(
        fx=intrinsics.fx / stride,
        fy=intrinsics.fy / stride,
        cx=intrinsics.cx / stride,
        cy=intrinsics.cy / stride,
    )
    return _finite_points(sub.backproject(depth))


def register_pair(query_depth, match_depth, matches_2d, intrinsics: CameraIntrinsics, config: RegisterConfig | None = None) -> RegistrationResult:
    """Lift -> RANSAC -> GICP; any stage's rejection propagates with its reason."""
    config = config or RegisterConfig()
    corr = lift_correspondences(matches_2d, query_depth, match_depth, intrinsics)
    if len(corr) < max(3, config.min_inliers):
        raise RegistrationRejected("too-few-matches", f"{len(corr)} usable of {config.min_inliers} required")
    try:
        coarse = estimate_rigid_ransac(corr, config)
    except RegistrationRejected as exc:
        raise RegistrationRejected("ransac-failed", exc.reason) from exc

    cloud_q = cloud_from_depth(query_depth, intrinsics, config.cloud_stride)
    cloud_m = cloud_from_depth(match_depth, intrinsics, config.cloud_stride)
    refined = gicp_refine(cloud_m, cloud_q, coarse.transform, config)
    if not refined.converged:
        raise RegistrationRejected("gicp-diverged", f"rms {refined.rms:.4f}")
    return refined
