"""Synthetic underwater surveys: trajectories, inertial/acoustic sensors, scenes.

World frame is NED (+z down), so gravity is +9.81 on z and "depth" is the
world z-coordinate. Body orientation is yaw-only (roll = pitch = 0), which
matches a survey platform holding attitude. All randomness flows through
per-stream seeds derived from a NoiseConfig seed, so a given config replays
identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .camera import CameraIntrinsics, StereoCalib
from .geom import Pose, Rotation, se3_exp

GRAVITY_W = np.array([0.0, 0.0, 9.81])  # NED: +z down

IMU_RATE_HZ = 200.0
DVL_RATE_HZ = 8.0
BARO_RATE_HZ = 5.0


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImuMeasurement:
    t: float
    gyro: np.ndarray  # rad/s, body frame
    accel: np.ndarray  # m/s^2 specific force, body frame


@dataclass(frozen=True)
class DvlMeasurement:
    t: float
    velocity: np.ndarray  # m/s in the DVL frame


@dataclass(frozen=True)
class BaroMeasurement:
    t: float
    depth: float  # meters, +down


@dataclass(frozen=True)
class RegistrationCandidate:
    """A synthesized loop-closure measurement between two keyframes."""

    query_id: int
    match_id: int
    transform: Pose  # measured camera-frame relative pose T_qm
    is_outlier: bool  # ground-truth label, for evaluation only


@dataclass
class NoiseConfig:
    """Sensor noise model. Sigmas are per-sample standard deviations."""

    accel_sigma: float = 0.02
    gyro_sigma: float = 0.002
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias_rw: float = 0.0  # random walk, units/s/sqrt(s)
    gyro_bias_rw: float = 0.0
    dvl_sigma: float = 0.02
    dvl_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    baro_sigma: float = 0.05
    seed: int = 0

    @classmethod
    def noiseless(cls) -> "NoiseConfig":
        return cls(accel_sigma=0.0, gyro_sigma=0.0, dvl_sigma=0.0, baro_sigma=0.0)

    def to_dict(self) -> dict:
        return {
            "accel_sigma": self.accel_sigma,
            "gyro_sigma": self.gyro_sigma,
            "accel_bias": list(self.accel_bias),
            "gyro_bias": list(self.gyro_bias),
            "accel_bias_rw": self.accel_bias_rw,
            "gyro_bias_rw": self.gyro_bias_rw,
            "dvl_sigma": self.dvl_sigma,
            "dvl_bias": list(self.dvl_bias),
            "baro_sigma": self.baro_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        kwargs = {}
        for key in cls().to_dict():
            if key in d:
                val = d[key]
                kwargs[key] = tuple(val) if isinstance(val, list) else val
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------


@dataclass
class TrajectorySpec:
    """Waypoint path: positions (N, 3) NED, optional yaw (N,), total duration."""

    waypoints: np.ndarray
    duration: float
    yaws: np.ndarray | None = None


class Trajectory:
    """Twice continuously differentiable sampler of the survey motion.

    Positions and yaw are natural cubic splines through the waypoints on a
    uniform time grid, so velocity and acceleration are well-defined and
    continuous everywhere (including across knots).
    """

    def __init__(self, spec: TrajectorySpec):
        wp = np.asarray(spec.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 3 or wp.shape[0] < 2:
            raise ValueError("Trajectory: waypoints must be (N >= 2, 3)")
        if spec.duration <= 0:
            raise ValueError("Trajectory: duration must be positive")
        self.duration = float(spec.duration)
        times = np.linspace(0.0, self.duration, wp.shape[0])
        self._pos = CubicSpline(times, wp, axis=0, bc_type="natural")
        self._vel = self._pos.derivative(1)
        self._acc = self._pos.derivative(2)
        yaws = np.zeros(wp.shape[0]) if spec.yaws is None else np.asarray(spec.yaws, dtype=float)
        if yaws.shape != (wp.shape[0],):
            raise ValueError("Trajectory: yaws must match waypoint count")
        self._yaw = CubicSpline(times, np.unwrap(yaws), bc_type="natural")
        self._yaw_rate = self._yaw.derivative(1)

    def position(self, t) -> np.ndarray:
        return self._pos(t)

    def velocity(self, t) -> np.ndarray:
        return self._vel(t)

    def acceleration(self, t) -> np.ndarray:
        return self._acc(t)

    def yaw(self, t):
        return self._yaw(t)

    def rotation(self, t: float) -> Rotation:
        return Rotation.from_rotvec(np.array([0.0, 0.0, float(self._yaw(t))]))

    def pose(self, t: float) -> Pose:
        return Pose(self.rotation(t), self.position(t))

    def body_velocity(self, t: float) -> np.ndarray:
        return self.rotation(t).inverse().apply(self.velocity(t))

    def angular_velocity_body(self, t) -> np.ndarray:
        t_arr = np.asarray(t, dtype=float)
        rate = np.atleast_1d(self._yaw_rate(t_arr)).astype(float)
        out = np.zeros(rate.shape + (3,))
        out[..., 2] = rate
        return out[0] if t_arr.ndim == 0 else out


def generate_trajectory(spec: TrajectorySpec) -> Trajectory:
    return Trajectory(spec)


# ---------------------------------------------------------------------------
# sensor synthesis
# ---------------------------------------------------------------------------


def _stream_rng(noise: NoiseConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([0x5E25, int(noise.seed), stream]))


def _to_body(yaw: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Rotate world vectors (n, 3) into the body frame of a yaw-only pose."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack(
        [c * vec[:, 0] + s * vec[:, 1], -s * vec[:, 0] + c * vec[:, 1], vec[:, 2]], axis=1
    )


def synthesize_imu(
    traj: Trajectory,
    noise: NoiseConfig,
    rate_hz: float = IMU_RATE_HZ,
) -> list[ImuMeasurement]:
    """Gyro/accelerometer stream at rate_hz over the whole trajectory.

    Each sample is stamped at the start of its interval and carries the
    mid-interval value (the zero-order-hold average to second order), so that
    integrating samples over their intervals reproduces the trajectory. The
    specific force is R^T (a_W - g_W) + b_a + noise: a stationary, level
    platform reads (0, 0, -9.81).
    """
    dt = 1.0 / rate_hz
    n = int(round(traj.duration * rate_hz))
    t0 = np.arange(n) * dt
    tm = t0 + 0.5 * dt
    a_w = np.atleast_2d(traj.acceleration(tm))
    omega = traj.angular_velocity_body(tm)
    f_body = _to_body(np.atleast_1d(traj.yaw(tm)), a_w - GRAVITY_W)
    gyro = omega + np.asarray(noise.gyro_bias, dtype=float)
    accel = f_body + np.asarray(noise.accel_bias, dtype=float)
    rng = _stream_rng(noise, 1)
    if noise.gyro_bias_rw > 0:
        inc = rng.normal(scale=noise.gyro_bias_rw * np.sqrt(dt), size=(n, 3))
        gyro = gyro + np.concatenate([np.zeros((1, 3)), np.cumsum(inc[:-1], axis=0)])
    if noise.accel_bias_rw > 0:
        inc = rng.normal(scale=noise.accel_bias_rw * np.sqrt(dt), size=(n, 3))
        accel = accel + np.concatenate([np.zeros((1, 3)), np.cumsum(inc[:-1], axis=0)])
    if noise.gyro_sigma > 0:
        gyro = gyro + rng.normal(scale=noise.gyro_sigma, size=(n, 3))
    if noise.accel_sigma > 0:
        accel = accel + rng.normal(scale=noise.accel_sigma, size=(n, 3))
    return [ImuMeasurement(t=float(t0[k]), gyro=gyro[k], accel=accel[k]) for k in range(n)]


def synthesize_dvl(
    traj: Trajectory,
    noise: NoiseConfig,
    extrinsics: Pose | None = None,
    rate_hz: float = DVL_RATE_HZ,
) -> list[DvlMeasurement]:
    """Bottom-lock velocity in the DVL frame at rate_hz.

    v_D = R_BD^T (v_B + omega x r_BD) + b_v + noise, with (R_BD, r_BD) the
    DVL mounting in the body frame.
    """
    if extrinsics is None:
        extrinsics = Pose.identity()
    r_bd = extrinsics.translation
    r_mat = extrinsics.rotation.as_matrix()
    dt = 1.0 / rate_hz
    ts = np.arange(int(np.floor(traj.duration * rate_hz)) + 1) * dt
    v_b = _to_body(np.atleast_1d(traj.yaw(ts)), np.atleast_2d(traj.velocity(ts)))
    omega = traj.angular_velocity_body(ts)
    vals = (v_b + np.cross(omega, r_bd)) @ r_mat + np.asarray(noise.dvl_bias, dtype=float)
    if noise.dvl_sigma > 0:
        rng = _stream_rng(noise, 2)
        vals = vals + rng.normal(scale=noise.dvl_sigma, size=vals.shape)
    return [DvlMeasurement(t=float(t), velocity=v) for t, v in zip(ts, vals)]


def synthesize_baro(
    traj: Trajectory,
    noise: NoiseConfig,
    rate_hz: float = BARO_RATE_HZ,
) -> list[BaroMeasurement]:
    """Depth (world z, meters) at rate_hz."""
    dt = 1.0 / rate_hz
    ts = np.minimum(np.arange(int(np.floor(traj.duration * rate_hz)) + 1) * dt, traj.duration)
    vals = np.atleast_2d(traj.position(ts))[:, 2]
    if noise.baro_sigma > 0:
        rng = _stream_rng(noise, 3)
        vals = vals + rng.normal(scale=noise.baro_sigma, size=vals.shape)
    return [BaroMeasurement(t=float(t), depth=float(z)) for t, z in zip(ts, vals)]


# ---------------------------------------------------------------------------
# scene and raycasting
# ---------------------------------------------------------------------------


@dataclass
class ScenePrimitive:
    """Analytic scene element. Supported kinds: plane, sphere, box, heightfield.

    plane: point + normal. sphere: center + radius. box: axis-aligned, center
    + half_extents. heightfield: world surface z = h(x, y) sampled on a grid
    anchored at origin_xy with spacing cell_xy (bilinear between samples).
    """

    kind: str
    point: tuple[float, float, float] | None = None
    normal: tuple[float, float, float] | None = None
    center: tuple[float, float, float] | None = None
    radius: float | None = None
    half_extents: tuple[float, float, float] | None = None
    origin_xy: tuple[float, float] = (0.0, 0.0)
    cell_xy: tuple[float, float] = (1.0, 1.0)
    heights: np.ndarray | None = None
    texture_id: int = 0

    def __post_init__(self):
        kinds = ("plane", "sphere", "box", "heightfield")
        if self.kind not in kinds:
            raise ValueError(f"ScenePrimitive: kind must be one of {kinds}, got {self.kind!r}")


def _intersect_plane(o, dirs, prim):
    n = np.asarray(prim.normal, dtype=float)
    n = n / np.linalg.norm(n)
    q = np.asarray(prim.point, dtype=float)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = ((q - o) @ n) / denom
    s = np.where(np.abs(denom) < 1e-12, np.nan, s)
    return np.where(s > 1e-6, s, np.nan)


def _intersect_sphere(o, dirs, prim):
    c = np.asarray(prim.center, dtype=float)
    oc = o - c
    A = np.sum(dirs * dirs, axis=-1)
    B = 2.0 * (dirs @ oc)
    C = float(oc @ oc) - prim.radius**2
    disc = B * B - 4.0 * A * C
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(disc)
        s1 = (-B - sq) / (2.0 * A)
        s2 = (-B + sq) / (2.0 * A)
    s = np.where(s1 > 1e-6, s1, np.where(s2 > 1e-6, s2, np.nan))
    return np.where(disc >= 0.0, s, np.nan)


def _intersect_box(o, dirs, prim):
    c = np.asarray(prim.center, dtype=float)
    he = np.asarray(prim.half_extents, dtype=float)
    lo = c - he
    hi = c + he
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / dirs
        t2 = (hi - o) / dirs
    near = np.fmin(t1, t2)
    far = np.fmax(t1, t2)
    # rays parallel to a slab: hit only if origin is inside that slab
    par = np.abs(dirs) < 1e-12
    inside = (o >= lo) & (o <= hi)
    near = np.where(par, np.where(inside, -np.inf, np.inf), near)
    far = np.where(par, np.where(inside, np.inf, -np.inf), far)
    tmin = near.max(axis=-1)
    tmax = far.min(axis=-1)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    return np.where(hit, tmin, np.nan)


def _heightfield_z(prim, x, y):
    hgrid = np.asarray(prim.heights, dtype=float)
    ox, oy = prim.origin_xy
    dx, dy = prim.cell_xy
    gx = (x - ox) / dx
    gy = (y - oy) / dy
    nx, ny = hgrid.shape[0], hgrid.shape[1]
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(gx) & np.isfinite(gy)
        ok &= (gx >= 0) & (gx <= nx - 1) & (gy >= 0) & (gy <= ny - 1)
    gx = np.clip(np.nan_to_num(gx), 0, nx - 1 - 1e-9)
    gy = np.clip(np.nan_to_num(gy), 0, ny - 1 - 1e-9)
    i0 = gx.astype(int)
    j0 = gy.astype(int)
    fx = gx - i0
    fy = gy - j0
    z = (
        hgrid[i0, j0] * (1 - fx) * (1 - fy)
        + hgrid[i0 + 1, j0] * fx * (1 - fy)
        + hgrid[i0, j0 + 1] * (1 - fx) * fy
        + hgrid[i0 + 1, j0 + 1] * fx * fy
    )
    return np.where(ok, z, np.nan)


def _intersect_heightfield(o, dirs, prim, max_range=80.0, step=0.25):
    shape = dirs.shape[:-1]
    s_lo = np.full(shape, np.nan)
    s_hi = np.full(shape, np.nan)
    prev_s = np.full(shape, 1e-6)
    pts = o + prev_s[..., None] * dirs
    prev_f = pts[..., 2] - _heightfield_z(prim, pts[..., 0], pts[..., 1])
    found = np.zeros(shape, dtype=bool)
    for s in np.arange(step, max_range, step):
        pts = o + s * dirs
        f = pts[..., 2] - _heightfield_z(prim, pts[..., 0], pts[..., 1])
        cross = ~found & (prev_f < 0) & (f >= 0)
        s_lo = np.where(cross, prev_s, s_lo)
        s_hi = np.where(cross, s, s_hi)
        found |= cross
        keep = ~np.isnan(f)
        prev_f = np.where(keep, f, prev_f)
        prev_s = np.where(keep, s, prev_s)
        if found.all():
            break
    # bisection refine
    for _ in range(40):
        mid = 0.5 * (s_lo + s_hi)
        pts = o + mid[..., None] * dirs
        f = pts[..., 2] - _heightfield_z(prim, pts[..., 0], pts[..., 1])
        go_hi = f < 0
        s_lo = np.where(found & go_hi, mid, s_lo)
        s_hi = np.where(found & ~go_hi, mid, s_hi)
    return np.where(found, 0.5 * (s_lo + s_hi), np.nan)


def primitive_albedo(points: np.ndarray, texture_id: int) -> np.ndarray:
    """Smooth, view-independent RGB texture of world position in [0.1, 0.95].

    Band-limited trig of the world coordinates: stereo-consistent by
    construction and smooth enough that bilinear resampling stays well under
    1e-3 photometric error at survey scales.
    """
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    tid = float(texture_id)
    k1 = 0.9 + 0.11 * (tid % 5.0)
    k2 = 0.7 + 0.07 * (tid % 7.0)
    k3 = 0.5 + 0.05 * (tid % 3.0)
    r = 0.5 + 0.35 * np.sin(k1 * x + 0.3 * tid) * np.cos(k2 * y + 0.1 * tid)
    g = 0.5 + 0.35 * np.sin(k2 * x + k3 * y + 0.7 + 0.2 * tid)
    b = 0.5 + 0.35 * np.cos(k1 * y + k3 * z + 1.3 + 0.15 * tid)
    return np.clip(np.stack([r, g, b], axis=-1), 0.1, 0.95)


def raycast_depth(
    scene: list[ScenePrimitive],
    pose: Pose,
    intrinsics: CameraIntrinsics,
    shape: tuple[int, int],
):
    """Render z-depth and albedo of a scene from a camera pose.

    Args:
        scene: primitives to intersect; nearest hit wins.
        pose: camera-to-world transform (camera +z forward).
        intrinsics: pinhole model.
        shape: (H, W) raster size.

    Returns:
        (depth, albedo): (H, W) z-depth in meters with NaN misses, and the
        (H, W, 3) albedo of the hit surfaces (misses get 0).
    """
    h, w = shape
    dirs_cam = intrinsics.ray_grid(h, w)
    R = pose.rotation.as_matrix()
    dirs = dirs_cam @ R.T
    o = pose.translation
    best = np.full((h, w), np.inf)
    which = np.full((h, w), -1, dtype=int)
    for idx, prim in enumerate(scene):
        if prim.kind == "plane":
            s = _intersect_plane(o, dirs, prim)
        elif prim.kind == "sphere":
            s = _intersect_sphere(o, dirs, prim)
        elif prim.kind == "box":
            s = _intersect_box(o, dirs, prim)
        else:
            s = _intersect_heightfield(o, dirs, prim)
        closer = np.isfinite(s) & (s < best)
        best = np.where(closer, s, best)
        which = np.where(closer, idx, which)
    depth = np.where(np.isfinite(best), best, np.nan)
    albedo = np.zeros((h, w, 3))
    points = o + np.where(np.isfinite(best), best, 1.0)[..., None] * dirs
    for idx, prim in enumerate(scene):
        sel = which == idx
        if sel.any():
            albedo[sel] = primitive_albedo(points[sel], prim.texture_id)
    return depth, albedo


def render_stereo_pair(
    scene: list[ScenePrimitive],
    pose_left: Pose,
    calib: StereoCalib,
    shape: tuple[int, int],
):
    """Ray-cast a rectified stereo pair.

    Returns (left, right, depth_left, depth_right, disparity_gt) where the
    ground-truth disparity is fx * baseline / depth_left (NaN at misses).
    """
    depth_l, left = raycast_depth(scene, pose_left, calib.left, shape)
    right_pose = pose_left @ Pose(Rotation.identity(), np.array([calib.baseline, 0.0, 0.0]))
    depth_r, right = raycast_depth(scene, right_pose, calib.left, shape)
    disparity = calib.disparity_of_depth(depth_l)
    return left, right, depth_l, depth_r, disparity


# ---------------------------------------------------------------------------
# loop-closure candidate synthesis
# ---------------------------------------------------------------------------


def synthesize_registrations(
    traj: Trajectory,
    keyframe_times: np.ndarray,
    cam_extrinsics: Pose,
    count: int,
    noise: NoiseConfig,
    rot_sigma: float = 0.005,
    trans_sigma: float = 0.01,
    outlier_rate: float = 0.2,
    min_age: float = 20.0,
    outlier_rot_min: float = np.deg2rad(30.0),
    outlier_trans_min: float = 2.0,
) -> list[RegistrationCandidate]:
    """Draw loop-closure measurements between keyframes at least min_age apart.

    Clean candidates perturb the true camera-frame relative pose with small
    tangent noise; outliers add a gross error of at least outlier_rot_min
    radians or outlier_trans_min meters (type chosen at random) and carry the
    ground-truth outlier flag for downstream evaluation only.
    """
    keyframe_times = np.asarray(keyframe_times, dtype=float)
    eligible_q = [i for i, t in enumerate(keyframe_times) if t - keyframe_times[0] >= min_age]
    if not eligible_q or count <= 0:
        return []
    rng = _stream_rng(noise, 4)
    out = []
    for _ in range(count):
        q = int(eligible_q[rng.integers(len(eligible_q))])
        old_enough = np.nonzero(keyframe_times <= keyframe_times[q] - min_age)[0]
        m = int(old_enough[rng.integers(len(old_enough))])
        cam_q = traj.pose(keyframe_times[q]) @ cam_extrinsics
        cam_m = traj.pose(keyframe_times[m]) @ cam_extrinsics
        t_qm = cam_q.inverse() @ cam_m
        xi = np.concatenate(
            [rng.normal(scale=rot_sigma, size=3), rng.normal(scale=trans_sigma, size=3)]
        )
        measured = t_qm @ se3_exp(xi)
        is_outlier = bool(rng.uniform() < outlier_rate)
        if is_outlier:
            # margins keep the gross error above the threshold even after the
            # small clean-noise perturbation is composed on top
            if rng.uniform() < 0.5:
                axis = rng.normal(size=3)
                axis /= np.linalg.norm(axis)
                angle = rng.uniform(1.1 * outlier_rot_min, 2.0 * outlier_rot_min)
                gross = np.concatenate([axis * angle, rng.normal(scale=0.2, size=3)])
            else:
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                mag = rng.uniform(1.1 * outlier_trans_min, 2.5 * outlier_trans_min)
                gross = np.concatenate([rng.normal(scale=0.02, size=3), direction * mag])
            measured = measured @ se3_exp(gross)
        out.append(
            RegistrationCandidate(query_id=q, match_id=m, transform=measured, is_outlier=is_outlier)
        )
    return out
