"""Quantitative evaluation: disparity error metrics, trajectory APE, map metrics.

Disparity metrics follow the usual stereo conventions (EPE, BP-X, D1) over a
selectable pixel region; the water column has zero ground-truth disparity by
definition, and geometry pixels without ground truth are excluded from every
region. Trajectory evaluation pairs estimate and reference by nearest
timestamp and reports translational RMSE, optionally after a rigid (se3) or
similarity (sim3) alignment. Map metrics compare voxel-downsampled clouds with
nearest-neighbor distances in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import Pose, umeyama_align
from .mapping import PointCloud

REGIONS = ("combined", "on_geometry", "water_column")
DEFAULT_BP_THRESHOLDS = (1.0, 3.0)
DEFAULT_MAX_DT = 0.02
DEFAULT_VOXEL = 0.05
DEFAULT_HIT_DISTANCE = 0.1


@dataclass
class PoseTrajectory:
    """Time-ordered pose samples (timestamps strictly increasing)."""

    times: np.ndarray
    poses: list[Pose]

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.poses) != self.times.shape[0]:
            raise ValueError("PoseTrajectory: times and poses length mismatch")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("PoseTrajectory: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])


@dataclass
class DisparityMetrics:
    epe: float
    bp: dict[float, float]  # threshold px -> percentage
    d1: float
    region: str
    pixel_count: int

    def to_dict(self) -> dict:
        return {
            "epe": self.epe,
            "bp": {f"{k:g}": v for k, v in self.bp.items()},
            "d1": self.d1,
            "region": self.region,
            "pixel_count": self.pixel_count,
        }


@dataclass
class MapMetrics:
    accuracy: float
    completion: float
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "completion": self.completion,
            "precision": self.precision,
            "recall": self.recall,
        }


# ---------------------------------------------------------------------------
# disparity
# ---------------------------------------------------------------------------


def disparity_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    fg_mask: np.ndarray,
    region: str = "combined",
    bp_thresholds=DEFAULT_BP_THRESHOLDS,
) -> DisparityMetrics:
    """EPE / BP-X / D1 in percent over the selected pixel region.

    fg_mask marks geometry pixels; everywhere else is water column with zero
    ground-truth disparity. Geometry pixels with non-finite ground truth are
    excluded from all regions.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    fg = np.asarray(fg_mask).astype(bool)
    if pred.shape != gt.shape or pred.shape != fg.shape:
        raise ValueError("disparity_metrics: shape mismatch")
    if region not in REGIONS:
        raise ValueError(f"disparity_metrics: unknown region {region!r}")

    effective_gt = np.where(fg, gt, 0.0)
    usable = ~fg | np.isfinite(gt)
    if region == "combined":
        sel = usable
    elif region == "on_geometry":
        sel = fg & usable
    else:
        sel = ~fg
    if not sel.any():
        raise ValueError(f"disparity_metrics: region {region!r} selects no pixels")
    p = pred[sel]
    if not np.all(np.isfinite(p)):
        raise ValueError("disparity_metrics: prediction has non-finite values in region")
    g = effective_gt[sel]
    err = np.abs(p - g)

    bp = {float(t): float(100.0 * np.mean(err > t)) for t in bp_thresholds}
    d1 = float(100.0 * np.mean((err > 3.0) & (err > 0.05 * np.abs(g))))
    return DisparityMetrics(
        epe=float(err.mean()),
        bp=bp,
        d1=d1,
        region=region,
        pixel_count=int(sel.sum()),
    )


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def associate(est: PoseTrajectory, ref: PoseTrajectory, max_dt: float = DEFAULT_MAX_DT):
    """Pair estimate and reference poses by nearest timestamp.

    Walks the estimate in time order, claiming for each sample the nearest
    still-unused reference within max_dt. Returns a list of
    (t_est, pose_est, t_ref, pose_ref).
    """
    if not max_dt > 0:
        raise ValueError("associate: max_dt must be positive")
    if len(est) == 0 or len(ref) == 0:
        raise ValueError("associate: empty trajectory")
    used = np.zeros(len(ref), dtype=bool)
    pairs = []
    for t, pose in zip(est.times, est.poses):
        j = int(np.searchsorted(ref.times, t))
        best = None
        for cand in (j - 1, j, j + 1):
            if 0 <= cand < len(ref) and not used[cand]:
                dt = abs(ref.times[cand] - t)
                if dt <= max_dt and (best is None or dt < best[1]):
                    best = (cand, dt)
        if best is not None:
            used[best[0]] = True
            pairs.append((float(t), pose, float(ref.times[best[0]]), ref.poses[best[0]]))
    if not pairs:
        raise ValueError("associate: no pairs within max_dt")
    return pairs


def ape_rmse(
    est: PoseTrajectory,
    ref: PoseTrajectory,
    align: str = "none",
    max_dt: float = DEFAULT_MAX_DT,
) -> float:
    """Translational RMSE after nearest-timestamp association.

    align='se3' removes a rigid offset (Umeyama), 'sim3' additionally a
    global scale; both need at least 3 associated pairs.
    """
    if align not in ("none", "se3", "sim3"):
        raise ValueError(f"ape_rmse: unknown alignment {align!r}")
    pairs = associate(est, ref, max_dt)
    p_est = np.stack([p.translation for _, p, _, _ in pairs])
    p_ref = np.stack([p.translation for _, _, _, p in pairs])
    if align != "none":
        if len(pairs) < 3:
            raise ValueError("ape_rmse: alignment needs at least 3 associated pairs")
        transform, scale = umeyama_align(p_est, p_ref, with_scale=(align == "sim3"))
        p_est = scale * transform.rotation.apply(p_est) + transform.translation
    err = p_est - p_ref
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


# ---------------------------------------------------------------------------
# maps
# ---------------------------------------------------------------------------


def voxel_downsample(points: np.ndarray, voxel: float = DEFAULT_VOXEL) -> np.ndarray:
    """Centroid per occupied voxel; output ordered by voxel key (deterministic)."""
    if not voxel > 0:
        raise ValueError("voxel_downsample: voxel size must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points.copy()
    keys = np.floor(points / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, points)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    return sums / counts[:, None]


def map_metrics(
    est: PointCloud,
    gt: PointCloud,
    voxel: float = DEFAULT_VOXEL,
    hit_distance: float = DEFAULT_HIT_DISTANCE,
) -> MapMetrics:
    """Accuracy/completion (mean NN distance each way) and precision/recall
    (fraction of points within hit_distance) on voxel-downsampled clouds."""
    if len(est) == 0 or len(gt) == 0:
        raise ValueError("map_metrics: empty cloud")
    e = voxel_downsample(est.positions, voxel)
    g = voxel_downsample(gt.positions, voxel)
    d_eg, _ = cKDTree(g).query(e)
    d_ge, _ = cKDTree(e).query(g)
    return MapMetrics(
        accuracy=float(d_eg.mean()),
        completion=float(d_ge.mean()),
        precision=float(np.mean(d_eg <= hit_distance)),
        recall=float(np.mean(d_ge <= hit_distance)),
    )
