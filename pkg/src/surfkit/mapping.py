"""Dense map construction from keyframe depth maps.

Each keyframe contributes a cleaned, world-frame point cloud: depth
discontinuities are invalidated first (edge cleaning), the surviving pixels
are back-projected through the pinhole intrinsics and the keyframe pose, and
the resulting cloud is filtered with statistical and radius outlier removal.
The map is the plain concatenation of the per-keyframe clouds in keyframe
order; no dedup or voxel fusion happens at this stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics
from .geom import Pose


@dataclass
class PointCloud:
    """World-frame points (N, 3) with optional per-point colors (N, 3)."""

    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("PointCloud: positions must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors).reshape(-1, 3)
            if len(self.colors) != len(self.positions):
                raise ValueError("PointCloud: colors must match positions")

    def __len__(self) -> int:
        return len(self.positions)

    def select(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.positions[keep],
            self.colors[keep] if self.colors is not None else None,
        )

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


@dataclass
class CleaningConfig:
    """Per-keyframe cleaning: edge test, then statistical, then radius."""

    edge_threshold: float = 0.3  # m, max 3x3 neighbor depth difference
    statistical_k: int = 16
    statistical_alpha: float = 2.0
    radius: float = 0.1  # m
    min_neighbors: int = 4

    def __post_init__(self) -> None:
        if (
            self.edge_threshold <= 0
            or self.statistical_k <= 0
            or self.statistical_alpha <= 0
            or self.radius <= 0
            or self.min_neighbors <= 0
        ):
            raise ValueError("CleaningConfig: all parameters must be positive")

    def to_dict(self) -> dict:
        return {
            "edge_threshold": self.edge_threshold,
            "statistical_k": self.statistical_k,
            "statistical_alpha": self.statistical_alpha,
            "radius": self.radius,
            "min_neighbors": self.min_neighbors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CleaningConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


def backproject(
    depth: np.ndarray,
    color: np.ndarray | None,
    intrinsics: CameraIntrinsics,
    pose: Pose,
) -> PointCloud:
    """World-frame cloud pose * (z * K^-1 [u v 1]); invalid depths skipped."""
    depth = np.asarray(depth, dtype=float)
    valid = np.isfinite(depth) & (depth > 0)
    cam = intrinsics.backproject(depth)[valid]
    cols = None
    if color is not None:
        cols = np.asarray(color)[valid]
    if cam.size == 0:
        return PointCloud(np.zeros((0, 3)), cols)
    return PointCloud(pose.apply(cam), cols)


def edge_clean(depth: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Invalidate pixels whose max depth difference to any of the 8 neighbors
    exceeds threshold; invalid neighbors do not count."""
    if not threshold > 0:
        raise ValueError("edge_clean: threshold must be positive")
    depth = np.asarray(depth, dtype=float)
    padded = np.full((depth.shape[0] + 2, depth.shape[1] + 2), np.nan)
    padded[1:-1, 1:-1] = depth
    worst = np.zeros_like(depth)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            neighbor = padded[1 + dr : padded.shape[0] - 1 + dr, 1 + dc : padded.shape[1] - 1 + dc]
            diff = np.abs(depth - neighbor)
            np.fmax(worst, diff, out=worst)  # fmax ignores NaN neighbors
    out = depth.copy()
    out[worst > threshold] = np.nan
    return out


def remove_outliers(cloud: PointCloud, config: CleaningConfig, kind: str) -> PointCloud:
    """Drop outliers: 'statistical' thresholds the mean k-NN distance at the
    global mean + alpha * std; 'radius' requires min_neighbors within radius."""
    if kind not in ("statistical", "radius"):
        raise ValueError(f"remove_outliers: unknown kind {kind!r}")
    if len(cloud) == 0:
        raise ValueError("remove_outliers: empty cloud")
    pos = cloud.positions
    tree = cKDTree(pos)
    if kind == "statistical":
        k = min(config.statistical_k, len(cloud) - 1)
        if k < 1:
            return cloud.select(np.zeros(len(cloud), dtype=bool))
        dists, _ = tree.query(pos, k=k + 1)
        mean_nn = dists[:, 1:].mean(axis=1)
        keep = mean_nn <= mean_nn.mean() + config.statistical_alpha * mean_nn.std()
    else:
        counts = tree.query_ball_point(pos, config.radius, return_length=True)
        keep = counts - 1 >= config.min_neighbors
    return cloud.select(keep)


def fuse(keyframes, intrinsics: CameraIntrinsics, cleaning: CleaningConfig | None = None) -> PointCloud:
    """Accumulate cleaned keyframe clouds in order.

    keyframes is an iterable of (depth, color-or-None, pose); each goes
    through edge_clean -> backproject -> statistical -> radius, and the
    results are concatenated without dedup.
    """
    cfg = cleaning if cleaning is not None else CleaningConfig()
    parts = []
    for depth, color, pose in keyframes:
        cleaned = edge_clean(depth, cfg.edge_threshold)
        cloud = backproject(cleaned, color, intrinsics, pose)
        if len(cloud):
            cloud = remove_outliers(cloud, cfg, "statistical")
        if len(cloud):
            cloud = remove_outliers(cloud, cfg, "radius")
        parts.append(cloud)
    if not parts:
        return PointCloud.empty()
    positions = np.concatenate([p.positions for p in parts], axis=0)
    colors = None
    if all(p.colors is not None for p in parts):
        colors = np.concatenate([p.colors for p in parts], axis=0)
    return PointCloud(positions, colors)
