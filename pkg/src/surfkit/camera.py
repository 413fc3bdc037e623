"""Pinhole camera and rectified stereo rig descriptions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels. +z looks forward, +x right, +y down."""

    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def ray_grid(self, height: int, width: int) -> np.ndarray:
        """(H, W, 3) unnormalized camera rays K^-1 [u, v, 1] at pixel centers."""
        u = np.arange(width, dtype=float)
        v = np.arange(height, dtype=float)
        uu, vv = np.meshgrid(u, v)
        x = (uu - self.cx) / self.fx
        y = (vv - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def backproject(self, depth: np.ndarray) -> np.ndarray:
        """(H, W, 3) camera-frame points from a z-depth raster (NaNs pass through)."""
        depth = np.asarray(depth, dtype=float)
        return self.ray_grid(*depth.shape) * depth[..., None]


@dataclass(frozen=True)
class StereoCalib:
    """Rectified stereo rig: shared intrinsics and baseline in meters.

    The right camera sits at +baseline along the left camera's x-axis, so a
    point with left-image column u and depth z appears in the right image at
    column u - fx * baseline / z.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float

    @property
    def left(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    def disparity_of_depth(self, depth: np.ndarray) -> np.ndarray:
        depth = np.asarray(depth, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.fx * self.baseline / depth

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "baseline": self.baseline,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StereoCalib":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            baseline=float(d["baseline"]),
        )
