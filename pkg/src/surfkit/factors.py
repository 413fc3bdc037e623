"""Keyframe-state estimation: IMU preintegration, sensor factors, sparse LM.

Conventions
-----------
- World frame is NED (+z down); gravity defaults to (0, 0, 9.81).
- Keyframe state x = (R, p, v, b^g, b^a, b^v): body-to-world rotation,
  world position, BODY-frame velocity, gyro/accelerometer/DVL biases.
- Error-state ordering per keyframe is (δθ, δp, δv, δb^g, δb^a, δb^v),
  18 numbers, with left-multiplicative rotation perturbation
  R <- Exp(δθ) R and additive perturbation elsewhere.
- Residuals are measurement - prediction; rotation-valued residuals use
  the log map. The IMU residual is ordered (rotation, velocity, position)
  to match the 9x9 preintegration covariance.

The solver is a full-graph Levenberg-Marquardt re-solve with warm starts:
each insertion re-linearizes the whole problem, which at desk scale is
fast and has the same fixed points as an incremental solver. Every factor
except loop-closing registrations couples only adjacent keyframes, so the
normal equations are block-tridiagonal; they are assembled straight into
LAPACK banded storage (cached index pattern, value refill per iteration)
and factorized with a banded Cholesky. Long-range registration factors
enter as a low-rank correction handled by the Woodbury identity, keeping
each solve O(keyframes) instead of generic sparse LU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cho_solve_banded, cholesky_banded

from .geom import (
    Pose,
    Rotation,
    quat_from_rotvec,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
    se3_adjoint,
    se3_log,
    se3_right_jacobian_inv,
    skew,
    so3_exp,
    so3_left_jacobian_inv,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

DEFAULT_GRAVITY = np.array([0.0, 0.0, 9.81])  # NED, +z down

STATE_DIM = 18
_SIGMA_FLOOR = 1e-8

# nonzero error-state columns per factor family (δθ p v bg ba bv layout)
_COLS_IMU_I = np.arange(15)  # rotation..accel bias
_COLS_IMU_J = np.arange(9)  # rotation, position, velocity
_COLS_BIAS = np.arange(9, 18)
_COLS_DVL = np.array([6, 7, 8, 9, 10, 11, 15, 16, 17])  # v, bg, bv
_COLS_POSE = np.arange(6)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class KeyframeState:
    """One keyframe: rotation, position (world), velocity (body), biases."""

    rotation: Rotation
    position: np.ndarray
    velocity: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    dvl_bias: np.ndarray
    timestamp: float = 0.0

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> "KeyframeState":
        return cls(
            rotation=Rotation.identity(),
            position=np.zeros(3),
            velocity=np.zeros(3),
            gyro_bias=np.zeros(3),
            accel_bias=np.zeros(3),
            dvl_bias=np.zeros(3),
            timestamp=timestamp,
        )

    def copy(self) -> "KeyframeState":
        return KeyframeState(
            rotation=Rotation(self.rotation.q.copy()),
            position=self.position.copy(),
            velocity=self.velocity.copy(),
            gyro_bias=self.gyro_bias.copy(),
            accel_bias=self.accel_bias.copy(),
            dvl_bias=self.dvl_bias.copy(),
            timestamp=self.timestamp,
        )

    def retract(self, delta: np.ndarray) -> "KeyframeState":
        """Apply an 18-vector error-state increment (δθ, δp, δv, δbg, δba, δbv)."""
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (STATE_DIM,):
            raise ValueError("retract: delta must be an 18-vector")
        return KeyframeState(
            rotation=Rotation.from_rotvec(delta[0:3]) @ self.rotation,
            position=self.position + delta[3:6],
            velocity=self.velocity + delta[6:9],
            gyro_bias=self.gyro_bias + delta[9:12],
            accel_bias=self.accel_bias + delta[12:15],
            dvl_bias=self.dvl_bias + delta[15:18],
            timestamp=self.timestamp,
        )

    def pose(self) -> Pose:
        return Pose(self.rotation, self.position)


# ---------------------------------------------------------------------------
# preintegration
# ---------------------------------------------------------------------------


@dataclass
class PreintegratedImu:
    """Relative IMU motion between two keyframes, at reference biases.

    covariance is 9x9 over (δφ, δv, δp). The bias Jacobians give the
    first-order change of (ΔR, Δv, Δp) per unit change of the gyro /
    accelerometer bias away from the reference values.
    """

    d_rot: Rotation
    d_vel: np.ndarray
    d_pos: np.ndarray
    dt: float
    covariance: np.ndarray
    j_rot_bg: np.ndarray
    j_vel_bg: np.ndarray
    j_vel_ba: np.ndarray
    j_pos_bg: np.ndarray
    j_pos_ba: np.ndarray
    gyro_bias_ref: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias_ref: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def corrected(self, gyro_bias: np.ndarray, accel_bias: np.ndarray):
        """First-order bias-corrected (ΔR, Δv, Δp) at the given biases."""
        dbg = np.asarray(gyro_bias, dtype=float) - self.gyro_bias_ref
        dba = np.asarray(accel_bias, dtype=float) - self.accel_bias_ref
        rot = self.d_rot @ Rotation.from_rotvec(self.j_rot_bg @ dbg)
        vel = self.d_vel + self.j_vel_bg @ dbg + self.j_vel_ba @ dba
        pos = self.d_pos + self.j_pos_bg @ dbg + self.j_pos_ba @ dba
        return rot, vel, pos


def preintegrate(
    measurements,
    gyro_bias_ref=(0.0, 0.0, 0.0),
    accel_bias_ref=(0.0, 0.0, 0.0),
    gyro_sigma: float = 1e-3,
    accel_sigma: float = 1e-2,
    end_time: float | None = None,
) -> PreintegratedImu:
    """Integrate an IMU stream into a relative-motion pseudo-measurement.

    Each sample is held constant over its interval [t_k, t_{k+1}); the final
    interval extends to end_time when given, else repeats the previous
    spacing. Sigmas are per-sample measurement noise and are floored at a
    tiny positive value so the covariance stays usable for whitening.
    """
    if not measurements:
        raise ValueError("preintegrate: need at least one measurement")
    times = np.array([m.t for m in measurements], dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("preintegrate: timestamps must be strictly increasing")
    if len(times) > 1:
        dts = np.diff(times)
        last = (end_time - times[-1]) if end_time is not None else dts[-1]
    else:
        if end_time is None:
            raise ValueError("preintegrate: single measurement needs end_time")
        dts = np.array([])
        last = end_time - times[-1]
    if last < 0:
        raise ValueError("preintegrate: end_time before last measurement")
    dts = np.append(dts, last)

    bg = np.asarray(gyro_bias_ref, dtype=float)
    ba = np.asarray(accel_bias_ref, dtype=float)
    sg = max(float(gyro_sigma), _SIGMA_FLOOR)
    sa = max(float(accel_sigma), _SIGMA_FLOOR)

    # batched per-sample quantities; the loop below only chains them
    gyro = np.stack([np.asarray(m.gyro, dtype=float) for m in measurements]) - bg
    accel = np.stack([np.asarray(m.accel, dtype=float) for m in measurements]) - ba
    steps = so3_exp(gyro * dts[:, None])
    jr_steps = so3_right_jacobian(gyro * dts[:, None])
    ahats = skew(accel)
    # gyro noise enters through Jr*dt; accel noise through dR blocks, and
    # dR Sigma_a dR^T = sigma_a^2 I for isotropic noise, so those blocks are
    # state-independent constants per step.
    gyro_cov = (jr_steps @ np.swapaxes(jr_steps, 1, 2)) * (sg * dts[:, None, None]) ** 2
    acc_var = (sa * dts) ** 2

    d_rot = np.eye(3)
    d_vel = np.zeros(3)
    d_pos = np.zeros(3)
    cov = np.zeros((9, 9))
    j_r = np.zeros((3, 3))
    j_vg = np.zeros((3, 3))
    j_va = np.zeros((3, 3))
    j_pg = np.zeros((3, 3))
    j_pa = np.zeros((3, 3))
    amat = np.eye(9)
    diag3 = (np.arange(3), np.arange(3))

    for k in range(len(dts)):
        dt = dts[k]
        if dt == 0.0:
            continue
        step = steps[k]
        rot_ahat = d_rot @ ahats[k]

        amat[0:3, 0:3] = step.T
        amat[3:6, 0:3] = rot_ahat * -dt
        amat[6:9, 0:3] = rot_ahat * (-0.5 * dt * dt)
        amat[6:9, 3:6][diag3] = dt
        cov = amat @ cov @ amat.T
        cov[0:3, 0:3] += gyro_cov[k]
        av = acc_var[k]
        cov[3:6, 3:6][diag3] += av
        cov[3:6, 6:9][diag3] += 0.5 * av * dt
        cov[6:9, 3:6][diag3] += 0.5 * av * dt
        cov[6:9, 6:9][diag3] += 0.25 * av * dt * dt

        rot_ahat_jr = rot_ahat @ j_r
        j_pg += j_vg * dt + rot_ahat_jr * (-0.5 * dt * dt)
        j_pa += j_va * dt + d_rot * (-0.5 * dt * dt)
        j_vg += rot_ahat_jr * -dt
        j_va += d_rot * -dt
        j_r = step.T @ j_r - jr_steps[k] * dt

        rot_a = d_rot @ accel[k]
        d_pos = d_pos + d_vel * dt + rot_a * (0.5 * dt * dt)
        d_vel = d_vel + rot_a * dt
        d_rot = d_rot @ step

    return PreintegratedImu(
        d_rot=Rotation.from_matrix(d_rot),
        d_vel=d_vel,
        d_pos=d_pos,
        dt=float(dts.sum()),
        covariance=0.5 * (cov + cov.T),
        j_rot_bg=j_r,
        j_vel_bg=j_vg,
        j_vel_ba=j_va,
        j_pos_bg=j_pg,
        j_pos_ba=j_pa,
        gyro_bias_ref=bg.copy(),
        accel_bias_ref=ba.copy(),
    )


def predict(state: KeyframeState, preint: PreintegratedImu, gravity=DEFAULT_GRAVITY) -> KeyframeState:
    """Propagate a keyframe through a preintegrated interval (biases carried)."""
    g = np.asarray(gravity, dtype=float)
    rot_c, vel_c, pos_c = preint.corrected(state.gyro_bias, state.accel_bias)
    dt = preint.dt
    rot_j = state.rotation @ rot_c
    v_w_i = state.rotation.apply(state.velocity)
    v_w_j = v_w_i + g * dt + state.rotation.apply(vel_c)
    p_j = state.position + v_w_i * dt + 0.5 * g * dt * dt + state.rotation.apply(pos_c)
    return KeyframeState(
        rotation=rot_j,
        position=p_j,
        velocity=rot_j.inverse().apply(v_w_j),
        gyro_bias=state.gyro_bias.copy(),
        accel_bias=state.accel_bias.copy(),
        dvl_bias=state.dvl_bias.copy(),
        timestamp=state.timestamp + dt,
    )


# ---------------------------------------------------------------------------
# batched residual cores (used by both the public functions and the solver)
# ---------------------------------------------------------------------------


def _mv(mats: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Batched matrix @ vector."""
    return (mats @ vecs[..., None])[..., 0]


def _imu_core(sta, i_idx, j_idx, pre, gravity, want_jac):
    """Batched IMU residuals (M, 9) and optional Jacobians (M, 9, 18) x2."""
    g = gravity
    ri = sta["R"][i_idx]
    rj = sta["R"][j_idx]
    rit = np.swapaxes(ri, -1, -2)
    rjt = np.swapaxes(rj, -1, -2)
    dt = pre["dt"][:, None]

    dbg = sta["bg"][i_idx] - pre["bg_ref"]
    dba = sta["ba"][i_idx] - pre["ba_ref"]
    phi_c = _mv(pre["j_rot_bg"], dbg)
    rot_c = pre["d_rot"] @ so3_exp(phi_c)
    vel_c = pre["d_vel"] + _mv(pre["j_vel_bg"], dbg) + _mv(pre["j_vel_ba"], dba)
    pos_c = pre["d_pos"] + _mv(pre["j_pos_bg"], dbg) + _mv(pre["j_pos_ba"], dba)

    r_theta = so3_log(rjt @ ri @ rot_c)

    v_w_j = _mv(rj, sta["v"][j_idx])
    u_vec = v_w_j - g * dt
    dv_pred = _mv(rit, u_vec) - sta["v"][i_idx]
    r_v = vel_c - dv_pred

    w_vec = sta["p"][j_idx] - sta["p"][i_idx] - 0.5 * g * dt * dt
    dp_pred = _mv(rit, w_vec) - sta["v"][i_idx] * dt
    r_p = pos_c - dp_pred

    r = np.concatenate([r_theta, r_v, r_p], axis=1)
    if not want_jac:
        return r, None, None

    m = len(i_idx)
    ji = np.zeros((m, 9, STATE_DIM))
    jj = np.zeros((m, 9, STATE_DIM))

    e_blk = so3_left_jacobian_inv(r_theta) @ rjt
    ji[:, 0:3, 0:3] = e_blk
    jj[:, 0:3, 0:3] = -e_blk
    ji[:, 0:3, 9:12] = so3_right_jacobian_inv(r_theta) @ so3_right_jacobian(phi_c) @ pre["j_rot_bg"]

    ji[:, 3:6, 0:3] = -rit @ skew(u_vec)
    jj[:, 3:6, 0:3] = rit @ skew(v_w_j)
    ji[:, 3:6, 6:9] = np.eye(3)
    jj[:, 3:6, 6:9] = -rit @ rj
    ji[:, 3:6, 9:12] = pre["j_vel_bg"]
    ji[:, 3:6, 12:15] = pre["j_vel_ba"]

    ji[:, 6:9, 0:3] = -rit @ skew(w_vec)
    ji[:, 6:9, 3:6] = rit
    jj[:, 6:9, 3:6] = -rit
    ji[:, 6:9, 6:9] = np.eye(3) * dt[..., None]
    ji[:, 6:9, 9:12] = pre["j_pos_bg"]
    ji[:, 6:9, 12:15] = pre["j_pos_ba"]
    return r, ji, jj


def _dvl_core(sta, i_idx, meas, omega, r_bd, a_db, want_jac):
    """Batched DVL residuals; a_db is R_BD^T, r_bd the lever arm."""
    v_i = sta["v"][i_idx]
    w_corr = omega - sta["bg"][i_idx]
    pred = (v_i + np.cross(w_corr, r_bd)) @ a_db.T + sta["bv"][i_idx]
    r = meas - pred
    if not want_jac:
        return r, None
    m = len(i_idx)
    j = np.zeros((m, 3, STATE_DIM))
    j[:, :, 6:9] = -a_db
    j[:, :, 9:12] = -a_db @ skew(r_bd)
    j[:, :, 15:18] = -np.eye(3)
    return r, j


def _registration_terms(pose_q: Pose, pose_m: Pose, measured: Pose, cam: Pose, want_jac):
    """Residual Log(T̃⁻¹ T̄) for the camera-frame relative pose, plus Jacobians."""
    cam_q = pose_q @ cam
    cam_m = pose_m @ cam
    rel = cam_q.inverse() @ cam_m
    r = se3_log(measured.inverse() @ rel)
    if not want_jac:
        return r, None, None
    jr_inv = se3_right_jacobian_inv(r)
    adj = se3_adjoint(cam_m.inverse())
    s_q = np.eye(6)
    s_q[3:6, 0:3] = skew(pose_q.translation)
    s_m = np.eye(6)
    s_m[3:6, 0:3] = skew(pose_m.translation)
    base = jr_inv @ adj
    jq = np.zeros((6, STATE_DIM))
    jm = np.zeros((6, STATE_DIM))
    jq[:, 0:6] = -base @ s_q
    jm[:, 0:6] = base @ s_m
    return r, jq, jm


# ---------------------------------------------------------------------------
# public residual functions (thin wrappers over the batched cores)
# ---------------------------------------------------------------------------


def _pack_states(states) -> dict:
    qs = np.stack([s.rotation.q for s in states])
    return {
        "q": qs,
        "R": quat_to_matrix(qs),
        "p": np.stack([s.position for s in states]).astype(float),
        "v": np.stack([s.velocity for s in states]).astype(float),
        "bg": np.stack([s.gyro_bias for s in states]).astype(float),
        "ba": np.stack([s.accel_bias for s in states]).astype(float),
        "bv": np.stack([s.dvl_bias for s in states]).astype(float),
    }


def _pack_preints(preints) -> dict:
    return {
        "d_rot": np.stack([p.d_rot.as_matrix() for p in preints]),
        "d_vel": np.stack([p.d_vel for p in preints]),
        "d_pos": np.stack([p.d_pos for p in preints]),
        "dt": np.array([p.dt for p in preints]),
        "j_rot_bg": np.stack([p.j_rot_bg for p in preints]),
        "j_vel_bg": np.stack([p.j_vel_bg for p in preints]),
        "j_vel_ba": np.stack([p.j_vel_ba for p in preints]),
        "j_pos_bg": np.stack([p.j_pos_bg for p in preints]),
        "j_pos_ba": np.stack([p.j_pos_ba for p in preints]),
        "bg_ref": np.stack([p.gyro_bias_ref for p in preints]),
        "ba_ref": np.stack([p.accel_bias_ref for p in preints]),
    }


def imu_residual(x_i: KeyframeState, x_j: KeyframeState, preint: PreintegratedImu, gravity=DEFAULT_GRAVITY):
    """9-vector IMU residual (rotation, velocity, position) and 9x18 Jacobians."""
    sta = _pack_states([x_i, x_j])
    pre = _pack_preints([preint])
    r, ji, jj = _imu_core(
        sta, np.array([0]), np.array([1]), pre, np.asarray(gravity, dtype=float), True
    )
    return r[0], ji[0], jj[0]


def dvl_residual(x_i: KeyframeState, measured_velocity, omega_body, extrinsics: Pose | None = None):
    """DVL residual r = ṽ − (R_BDᵀ(v_i + (ω̃−b^g)×r_BD) + b^v) and 3x18 Jacobian.

    omega_body is the raw gyro reading associated with the keyframe; the
    state's gyro bias is subtracted internally.
    """
    if extrinsics is None:
        extrinsics = Pose.identity()
    sta = _pack_states([x_i])
    a_db = extrinsics.rotation.as_matrix().T
    r, j = _dvl_core(
        sta,
        np.array([0]),
        np.asarray(measured_velocity, dtype=float)[None],
        np.asarray(omega_body, dtype=float)[None],
        extrinsics.translation,
        a_db,
        True,
    )
    return r[0], j[0]


def baro_residual(x_i: KeyframeState, measured_depth: float):
    """Scalar depth residual r = z̃ − p_z and its 1x18 Jacobian."""
    r = float(measured_depth) - float(x_i.position[2])
    j = np.zeros((1, STATE_DIM))
    j[0, 5] = -1.0
    return r, j


def registration_residual(x_q: KeyframeState, x_m: KeyframeState, measured: Pose, cam_extrinsics: Pose):
    """SE(3) log residual of a camera-frame relative-pose measurement."""
    r, jq, jm = _registration_terms(x_q.pose(), x_m.pose(), measured, cam_extrinsics, True)
    return r, jq, jm


def prior_residual(x: KeyframeState, mean: KeyframeState):
    """18-vector deviation from a prior mean (rotation via log map)."""
    r = np.zeros(STATE_DIM)
    rot_err = x.rotation @ mean.rotation.inverse()
    r[0:3] = rot_err.as_rotvec()
    r[3:6] = x.position - mean.position
    r[6:9] = x.velocity - mean.velocity
    r[9:12] = x.gyro_bias - mean.gyro_bias
    r[12:15] = x.accel_bias - mean.accel_bias
    r[15:18] = x.dvl_bias - mean.dvl_bias
    j = np.eye(STATE_DIM)
    j[0:3, 0:3] = so3_left_jacobian_inv(r[0:3])
    return r, j


def huber_weight(residual_norm: float, delta: float = 1.345) -> float:
    """IRLS weight of the Huber kernel: 1 inside delta, delta/‖r‖ beyond."""
    if delta <= 0:
        raise ValueError("huber_weight: delta must be positive")
    n = abs(float(residual_norm))
    return 1.0 if n <= delta else delta / n


def mahalanobis_gate(measured: Pose, mean: Pose, cov: np.ndarray, threshold: float = 2.5):
    """Squared Mahalanobis distance of Log(mean⁻¹ T̃) under cov; accept iff ≤ threshold."""
    cov = np.asarray(cov, dtype=float)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("mahalanobis_gate: covariance must be positive definite") from exc
    try:
        r = se3_log(mean.inverse() @ measured)
    except ValueError:
        return np.inf, False
    d = float(r @ np.linalg.solve(cov, r))
    return d, d <= threshold


# ---------------------------------------------------------------------------
# factor graph
# ---------------------------------------------------------------------------


@dataclass
class SolverConfig:
    max_iterations: int = 15
    cost_tolerance: float = 1e-8
    lambda_init: float = 1e-6
    lambda_up: float = 4.0
    lambda_down: float = 3.0
    huber_delta: float = 1.345
    gate_threshold: float = 2.5

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "cost_tolerance": self.cost_tolerance,
            "lambda_init": self.lambda_init,
            "lambda_up": self.lambda_up,
            "lambda_down": self.lambda_down,
            "huber_delta": self.huber_delta,
            "gate_threshold": self.gate_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


DEFAULT_PRIOR_SIGMAS = np.array(
    [1e-4] * 3 + [1e-4] * 3 + [1e-3] * 3 + [1e-2] * 3 + [5e-2] * 3 + [2e-2] * 3
)


class FactorGraph:
    """Sparse keyframe graph over IMU, DVL, barometer, prior, registration factors.

    Single-writer: one owner mutates; `states` snapshots may be shared.
    """

    def __init__(
        self,
        cam_extrinsics: Pose | None = None,
        dvl_extrinsics: Pose | None = None,
        config: SolverConfig | None = None,
        gravity=DEFAULT_GRAVITY,
        prior_sigmas=None,
    ):
        self.cam_extrinsics = cam_extrinsics if cam_extrinsics is not None else Pose.identity()
        self.dvl_extrinsics = dvl_extrinsics if dvl_extrinsics is not None else Pose.identity()
        self.config = config if config is not None else SolverConfig()
        self.gravity = np.asarray(gravity, dtype=float)
        self.prior_sigmas = (
            np.asarray(prior_sigmas, dtype=float)
            if prior_sigmas is not None
            else DEFAULT_PRIOR_SIGMAS.copy()
        )
        self._states: list[KeyframeState] = []
        self._imu = []  # (i, j, PreintegratedImu, rw_inv_sigma (9,))
        self._dvl = []  # (i, velocity, omega, inv_sigma)
        self._baro = []  # (i, depth, inv_sigma)
        self._priors = []  # (i, mean KeyframeState, inv_sigmas (18,))
        self._regs = []  # (q, m, Pose, sqrt_info (6,6), robust)
        self._caches_dirty = True
        self._sys_solve = None
        self._solved = False

    # -- construction -------------------------------------------------------

    @property
    def states(self) -> list[KeyframeState]:
        return self._states

    @property
    def num_keyframes(self) -> int:
        return len(self._states)

    def add_keyframe(
        self,
        state: KeyframeState | None = None,
        timestamp: float | None = None,
        preint: PreintegratedImu | None = None,
        bias_rw_sigmas=(0.0, 0.0, 0.0),
    ) -> int:
        """Insert a keyframe; with a preintegrated interval the state is
        predicted from the previous keyframe and an IMU factor (including the
        bias random-walk block) is added. The first keyframe receives the
        default prior."""
        if preint is not None and not self._states:
            raise ValueError("add_keyframe: first keyframe cannot have a preintegrated interval")
        if state is None:
            if preint is None:
                raise ValueError("add_keyframe: need an initial state or a preintegrated interval")
            state = predict(self._states[-1], preint, self.gravity)
        else:
            state = state.copy()
        if timestamp is not None:
            state.timestamp = float(timestamp)
        if self._states and state.timestamp <= self._states[-1].timestamp:
            raise ValueError("add_keyframe: timestamps must be strictly increasing")
        self._states.append(state)
        idx = len(self._states) - 1
        if idx == 0:
            self.add_prior(0, state, self.prior_sigmas)
        if preint is not None:
            rw = np.repeat(np.asarray(bias_rw_sigmas, dtype=float), 3) * np.sqrt(max(preint.dt, 0.0))
            rw = np.maximum(rw, _SIGMA_FLOOR)
            self._imu.append((idx - 1, idx, preint, 1.0 / rw))
        self._mark_dirty()
        self._solved = False
        return idx

    def add_prior(self, i: int | None = None, mean: KeyframeState | None = None, sigmas=None) -> None:
        if i is None or mean is None or sigmas is None:
            raise ValueError("add_prior: need keyframe index, mean state, and sigmas")
        sigmas = np.maximum(np.asarray(sigmas, dtype=float), _SIGMA_FLOOR)
        if sigmas.shape != (STATE_DIM,):
            raise ValueError("add_prior: sigmas must be an 18-vector")
        self._check_index(i)
        self._priors.append((i, mean.copy(), 1.0 / sigmas))
        self._mark_dirty()

    def add_dvl_factor(self, i: int, velocity, omega_body, sigma: float) -> None:
        self._check_index(i)
        inv = 1.0 / max(float(sigma), _SIGMA_FLOOR)
        self._dvl.append(
            (i, np.asarray(velocity, dtype=float), np.asarray(omega_body, dtype=float), inv)
        )
        self._mark_dirty()

    def add_baro_factor(self, i: int, depth: float, sigma: float) -> None:
        self._check_index(i)
        self._baro.append((i, float(depth), 1.0 / max(float(sigma), _SIGMA_FLOOR)))
        self._mark_dirty()

    def add_registration_factor(self, q: int, m: int, measured: Pose, cov, robust: bool = True) -> None:
        self._check_index(q)
        self._check_index(m)
        if q == m:
            raise ValueError("add_registration_factor: q and m must differ")
        cov = np.asarray(cov, dtype=float)
        sqrt_info = np.linalg.inv(np.linalg.cholesky(cov))
        self._regs.append((q, m, measured, sqrt_info, robust))
        self._mark_dirty()

    def _check_index(self, i: int) -> None:
        if not 0 <= i < len(self._states):
            raise KeyError(f"keyframe {i} does not exist")

    def _mark_dirty(self) -> None:
        self._caches_dirty = True
        self._sys_solve = None

    # -- linearization ------------------------------------------------------

    def _rebuild_caches(self) -> None:
        """Stack per-family factor constants and build the H sparsity pattern."""
        if not self._caches_dirty:
            return
        c = {}
        rows, cols = [], []

        def block(idx_a, idx_b, sub_r, sub_c):
            shape = (len(idx_a), len(sub_r), len(sub_c))
            r = idx_a[:, None, None] * STATE_DIM + sub_r[None, :, None]
            cc = idx_b[:, None, None] * STATE_DIM + sub_c[None, None, :]
            rows.append(np.broadcast_to(r, shape).ravel())
            cols.append(np.broadcast_to(cc, shape).ravel())

        def diag_block(idx_a, idx_b, sub):
            rows.append((idx_a[:, None] * STATE_DIM + sub[None, :]).ravel())
            cols.append((idx_b[:, None] * STATE_DIM + sub[None, :]).ravel())

        if self._imu:
            ii = c["imu_i"] = np.array([f[0] for f in self._imu])
            jj = c["imu_j"] = np.array([f[1] for f in self._imu])
            c["imu_pre"] = _pack_preints([f[2] for f in self._imu])
            covs = np.stack([f[2].covariance for f in self._imu])
            # guard against exactly singular covariances from zero-noise runs
            c["imu_sqrt_info"] = np.linalg.inv(np.linalg.cholesky(covs + np.eye(9) * 1e-16))
            c["imu_rw_inv"] = np.stack([f[3] for f in self._imu])
            block(ii, ii, _COLS_IMU_I, _COLS_IMU_I)
            block(jj, jj, _COLS_IMU_J, _COLS_IMU_J)
            block(ii, jj, _COLS_IMU_I, _COLS_IMU_J)
            block(jj, ii, _COLS_IMU_J, _COLS_IMU_I)
            diag_block(ii, ii, _COLS_BIAS)
            diag_block(jj, jj, _COLS_BIAS)
            diag_block(ii, jj, _COLS_BIAS)
            diag_block(jj, ii, _COLS_BIAS)
        if self._dvl:
            di = c["dvl_i"] = np.array([f[0] for f in self._dvl])
            c["dvl_meas"] = np.stack([f[1] for f in self._dvl])
            c["dvl_omega"] = np.stack([f[2] for f in self._dvl])
            c["dvl_inv"] = np.array([f[3] for f in self._dvl])
            block(di, di, _COLS_DVL, _COLS_DVL)
        if self._baro:
            bi = c["baro_i"] = np.array([f[0] for f in self._baro])
            c["baro_meas"] = np.array([f[1] for f in self._baro])
            c["baro_inv"] = np.array([f[2] for f in self._baro])
            z = bi * STATE_DIM + 5
            rows.append(z)
            cols.append(z)
        full = np.arange(STATE_DIM)
        for i, _, _ in self._priors:
            idx = np.array([i])
            block(idx, idx, full, full)
        # registrations between adjacent keyframes fit inside the band; any
        # longer-range link becomes a low-rank (Woodbury) column instead
        reg_in_band = [abs(q - m) == 1 for q, m, _, _, _ in self._regs]
        for (q, m, _, _, _), in_band in zip(self._regs, reg_in_band):
            if not in_band:
                continue
            iq, im = np.array([q]), np.array([m])
            block(iq, iq, _COLS_POSE, _COLS_POSE)
            block(im, im, _COLS_POSE, _COLS_POSE)
            block(iq, im, _COLS_POSE, _COLS_POSE)
            block(im, iq, _COLS_POSE, _COLS_POSE)
        c["reg_in_band"] = reg_in_band
        c["num_reg_lowrank"] = reg_in_band.count(False)

        dim = len(self._states) * STATE_DIM
        bandwidth = min(2 * STATE_DIM - 1, max(dim - 1, 0))
        r_all = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        c_all = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        # lower-banded storage: ab[i - j, j] = H[i, j] for j <= i <= j + bandwidth
        keep = r_all >= c_all
        off = r_all[keep] - c_all[keep]
        if off.size and off.max() > bandwidth:
            raise RuntimeError("factor couples non-adjacent keyframes outside the band")
        c["band_keep"] = np.nonzero(keep)[0]
        c["band_flat"] = off * dim + c_all[keep]
        c["band_rows"] = bandwidth + 1
        c["dim"] = dim
        self._cache = c
        self._caches_dirty = False

    def _pack(self) -> dict:
        return _pack_states(self._states)

    def _retract_packed(self, sta: dict, delta: np.ndarray) -> dict:
        d = delta.reshape(-1, STATE_DIM)
        q = quat_normalize(quat_mul(quat_from_rotvec(d[:, 0:3]), sta["q"]))
        return {
            "q": q,
            "R": quat_to_matrix(q),
            "p": sta["p"] + d[:, 3:6],
            "v": sta["v"] + d[:, 6:9],
            "bg": sta["bg"] + d[:, 9:12],
            "ba": sta["ba"] + d[:, 12:15],
            "bv": sta["bv"] + d[:, 15:18],
        }

    def _writeback(self, sta: dict) -> None:
        for k, s in enumerate(self._states):
            s.rotation = Rotation(sta["q"][k].copy())
            s.position = sta["p"][k].copy()
            s.velocity = sta["v"][k].copy()
            s.gyro_bias = sta["bg"][k].copy()
            s.accel_bias = sta["ba"][k].copy()
            s.dvl_bias = sta["bv"][k].copy()

    def _assemble(self, sta: dict, want_jac: bool):
        """Robust cost; with want_jac also the normal equations (H, g).

        H is returned as (banded chain, low-rank registration columns).
        Value blocks are emitted in exactly the order the pattern was built
        in `_rebuild_caches`, then summed into banded storage.
        """
        self._rebuild_caches()
        c = self._cache
        n = len(self._states)
        cost = 0.0
        vals = []
        g = np.zeros((n, STATE_DIM)) if want_jac else None

        def outer(ja, jb):
            return np.swapaxes(ja, 1, 2) @ jb

        if self._imu:
            i_idx, j_idx = c["imu_i"], c["imu_j"]
            r9, ji, jj = _imu_core(sta, i_idx, j_idx, c["imu_pre"], self.gravity, want_jac)
            si = c["imu_sqrt_info"]
            rw = np.concatenate(
                [
                    sta["bg"][j_idx] - sta["bg"][i_idx],
                    sta["ba"][j_idx] - sta["ba"][i_idx],
                    sta["bv"][j_idx] - sta["bv"][i_idx],
                ],
                axis=1,
            )
            rw_w = rw * c["imu_rw_inv"]
            r_w = _mv(si, r9)
            cost += 0.5 * float((r_w * r_w).sum() + (rw_w * rw_w).sum())
            if want_jac:
                jwi = (si @ ji)[:, :, :15]
                jwj = (si @ jj)[:, :, :9]
                np.add.at(g[:, :15], i_idx, _mv(np.swapaxes(jwi, 1, 2), r_w))
                np.add.at(g[:, :9], j_idx, _mv(np.swapaxes(jwj, 1, 2), r_w))
                hij = outer(jwi, jwj)
                vals += [
                    outer(jwi, jwi).ravel(),
                    outer(jwj, jwj).ravel(),
                    hij.ravel(),
                    np.swapaxes(hij, 1, 2).ravel(),
                ]
                w2 = c["imu_rw_inv"] ** 2
                vals += [w2.ravel(), w2.ravel(), (-w2).ravel(), (-w2).ravel()]
                grw = rw_w * c["imu_rw_inv"]
                np.add.at(g[:, 9:18], i_idx, -grw)
                np.add.at(g[:, 9:18], j_idx, grw)

        if self._dvl:
            a_db = self.dvl_extrinsics.rotation.as_matrix().T
            r3, j3 = _dvl_core(
                sta, c["dvl_i"], c["dvl_meas"], c["dvl_omega"],
                self.dvl_extrinsics.translation, a_db, want_jac,
            )
            r_w = r3 * c["dvl_inv"][:, None]
            cost += 0.5 * float((r_w * r_w).sum())
            if want_jac:
                jd = j3[:, :, _COLS_DVL] * c["dvl_inv"][:, None, None]
                gd = _mv(np.swapaxes(jd, 1, 2), r_w)
                np.add.at(g[:, 6:12], c["dvl_i"], gd[:, :6])
                np.add.at(g[:, 15:18], c["dvl_i"], gd[:, 6:9])
                vals.append(outer(jd, jd).ravel())

        if self._baro:
            r1 = (c["baro_meas"] - sta["p"][c["baro_i"], 2]) * c["baro_inv"]
            cost += 0.5 * float(r1 @ r1)
            if want_jac:
                np.add.at(g[:, 5], c["baro_i"], -r1 * c["baro_inv"])
                vals.append(c["baro_inv"] ** 2)

        for i, mean, inv in self._priors:
            x = KeyframeState(
                Rotation(sta["q"][i]), sta["p"][i], sta["v"][i],
                sta["bg"][i], sta["ba"][i], sta["bv"][i],
            )
            r18, j18 = prior_residual(x, mean)
            r_w = r18 * inv
            cost += 0.5 * float(r_w @ r_w)
            if want_jac:
                jw = j18 * inv[:, None]
                g[i] += jw.T @ r_w
                vals.append((jw.T @ jw).ravel())

        delta = self.config.huber_delta
        lowrank = None
        if want_jac and c["num_reg_lowrank"]:
            lowrank = np.zeros((c["dim"], 6 * c["num_reg_lowrank"]))
        col = 0
        for (q, m_idx, measured, sqrt_info, robust), in_band in zip(self._regs, c["reg_in_band"]):
            pq = Pose(Rotation(sta["q"][q]), sta["p"][q])
            pm = Pose(Rotation(sta["q"][m_idx]), sta["p"][m_idx])
            r6, jq, jm = _registration_terms(pq, pm, measured, self.cam_extrinsics, want_jac)
            r_w = sqrt_info @ r6
            s = float(np.linalg.norm(r_w))
            if robust and s > delta:
                cost += delta * (s - 0.5 * delta)
                w = delta / s
            else:
                cost += 0.5 * s * s
                w = 1.0
            if want_jac:
                sw = np.sqrt(w)
                r_w = r_w * sw
                jwq = sw * (sqrt_info @ jq[:, :6])
                jwm = sw * (sqrt_info @ jm[:, :6])
                g[q, :6] += jwq.T @ r_w
                g[m_idx, :6] += jwm.T @ r_w
                if in_band:
                    hqm = jwq.T @ jwm
                    vals += [(jwq.T @ jwq).ravel(), (jwm.T @ jwm).ravel(), hqm.ravel(), hqm.T.ravel()]
                else:
                    lowrank[q * STATE_DIM : q * STATE_DIM + 6, col : col + 6] = jwq.T
                    lowrank[m_idx * STATE_DIM : m_idx * STATE_DIM + 6, col : col + 6] = jwm.T
                    col += 6

        if not want_jac:
            return cost, None, None
        stream = np.concatenate(vals) if vals else np.zeros(0)
        flat = np.bincount(
            c["band_flat"],
            weights=stream[c["band_keep"]],
            minlength=c["band_rows"] * c["dim"],
        )
        return cost, (flat.reshape(c["band_rows"], c["dim"]), lowrank), g.reshape(-1)

    def _cost(self, sta: dict) -> float:
        return self._assemble(sta, False)[0]

    @staticmethod
    def _banded_solver(band, lowrank, damping=None):
        """Solve closure for H = banded + lowrank @ lowrank.T (+ diag damping).

        The banded chain is factorized with a banded Cholesky; long-range
        registration columns are folded in through the Woodbury identity.
        Raises numpy.linalg.LinAlgError when the damped chain is not
        positive definite.
        """
        if damping is not None:
            band = band.copy()
            band[0] += damping
        chol = cholesky_banded(band, lower=True, check_finite=False)
        if lowrank is None:
            return lambda rhs: cho_solve_banded((chol, True), rhs, check_finite=False)
        y = cho_solve_banded((chol, True), lowrank, check_finite=False)
        cap = lowrank.T @ y
        cap[np.diag_indices_from(cap)] += 1.0
        cap_chol = cho_factor(cap, check_finite=False)

        def solve(rhs):
            x = cho_solve_banded((chol, True), rhs, check_finite=False)
            return x - y @ cho_solve(cap_chol, lowrank.T @ x, check_finite=False)

        return solve

    # -- solving -------------------------------------------------------------

    def optimize(self, config: SolverConfig | None = None) -> dict:
        """Levenberg-Marquardt over all keyframes; returns an iteration report.

        Accepted steps never increase the robust cost. `converged` is true
        when the relative decrease falls below cost_tolerance (or no further
        descent direction exists); false means max_iterations ran out first.
        """
        cfg = config if config is not None else self.config
        if not self._states:
            raise RuntimeError("optimize: empty graph")
        if not self._priors:
            raise RuntimeError("optimize: graph has no prior; gauge is unconstrained")
        sta = self._pack()
        cost, parts, g = self._assemble(sta, True)
        initial_cost = cost
        lam = cfg.lambda_init
        iterations = 0
        converged = initial_cost <= 1e-16
        while not converged and iterations < cfg.max_iterations:
            iterations += 1
            band, lowrank = parts
            d = band[0].copy()
            if lowrank is not None:
                d += (lowrank * lowrank).sum(axis=1)
            stepped = False
            factorized = False
            decrease = 0.0
            for _ in range(12):
                try:
                    solve = self._banded_solver(band, lowrank, lam * d)
                except np.linalg.LinAlgError:
                    lam *= cfg.lambda_up
                    continue
                factorized = True
                delta = solve(-g)
                if not np.all(np.isfinite(delta)):
                    raise RuntimeError("optimize: non-finite update (indefinite normal equations)")
                trial = self._retract_packed(sta, delta)
                trial_cost = self._cost(trial)
                if np.isfinite(trial_cost) and trial_cost <= cost:
                    decrease = cost - trial_cost
                    sta = trial
                    cost = trial_cost
                    lam = max(lam / cfg.lambda_down, 1e-12)
                    stepped = True
                    break
                lam *= cfg.lambda_up
            if not stepped:
                if not factorized:
                    raise RuntimeError("optimize: normal equations are singular")
                # fully damped with no descent: numerically at an optimum
                converged = True
                break
            if decrease <= cfg.cost_tolerance * max(cost, 1.0) or cost <= 1e-16:
                converged = True
                break
            cost, parts, g = self._assemble(sta, True)
        self._writeback(sta)
        self._sys_solve = None
        self._solved = True
        return {
            "iterations": iterations,
            "initial_cost": float(initial_cost),
            "final_cost": float(cost),
            "converged": bool(converged),
            "lambda_final": float(lam),
        }

    def _system_solver(self):
        if not self._solved:
            raise RuntimeError("graph must be optimized before covariance queries")
        if self._sys_solve is None:
            _, (band, lowrank), _ = self._assemble(self._pack(), True)
            scale = max(float(band[0].max(initial=0.0)), 1.0)
            for jitter in (0.0, 1e-12, 1e-9, 1e-6):
                try:
                    self._sys_solve = self._banded_solver(
                        band, lowrank, jitter * scale if jitter else None
                    )
                    break
                except np.linalg.LinAlgError:
                    continue
            else:
                raise RuntimeError("covariance query: normal equations are singular")
        return self._sys_solve

    # -- covariance and gating ----------------------------------------------

    def marginal_relative_covariance(self, q: int, m: int) -> np.ndarray:
        """6x6 covariance of the camera-frame relative pose between q and m."""
        self._check_index(q)
        self._check_index(m)
        if q == m:
            return np.zeros((6, 6))
        solve = self._system_solver()
        dim = len(self._states) * STATE_DIM
        idx = np.concatenate([q * STATE_DIM + np.arange(6), m * STATE_DIM + np.arange(6)])
        rhs = np.zeros((dim, 12))
        rhs[idx, np.arange(12)] = 1.0
        sol = solve(rhs)
        sigma_sub = sol[idx, :]
        pose_q = self._states[q].pose()
        pose_m = self._states[m].pose()
        adj = se3_adjoint((pose_m @ self.cam_extrinsics).inverse())
        s_q = np.eye(6)
        s_q[3:6, 0:3] = skew(pose_q.translation)
        s_m = np.eye(6)
        s_m[3:6, 0:3] = skew(pose_m.translation)
        j_rel = np.hstack([-adj @ s_q, adj @ s_m])
        sigma = j_rel @ sigma_sub @ j_rel.T
        return 0.5 * (sigma + sigma.T)

    def relative_camera_pose(self, q: int, m: int) -> Pose:
        cam_q = self._states[q].pose() @ self.cam_extrinsics
        cam_m = self._states[m].pose() @ self.cam_extrinsics
        return cam_q.inverse() @ cam_m

    def process_registration(self, q: int, m: int, measured: Pose, cov) -> dict:
        """Gate a registration candidate against the innovation covariance
        (tracker marginal plus measurement covariance); on acceptance add the
        robust factor and re-optimize.

        The measurement term matters on axes the tracker pins tightly
        (IMU-observed roll/pitch): gating those against the marginal alone
        would reject any candidate whose own noise exceeds the tracker's
        certainty, no matter how good the estimate is."""
        mean = self.relative_camera_pose(q, m)
        sigma = self.marginal_relative_covariance(q, m) + np.asarray(cov, dtype=float)
        d, accept = mahalanobis_gate(measured, mean, sigma, self.config.gate_threshold)
        if accept:
            self.add_registration_factor(q, m, measured, cov, robust=True)
            self._solved = False
            self.optimize()
        return {"added": bool(accept), "gated_out": not accept, "distance": float(d)}

    # -- serialization --------------------------------------------------------

    def serialize(self) -> dict:
        """JSON-ready snapshot of states and factor counts (debugging aid)."""
        kfs = []
        for s in self._states:
            kfs.append(
                {
                    "t": s.timestamp,
                    "quat_wxyz": [float(x) for x in s.rotation.q],
                    "position": [float(x) for x in s.position],
                    "velocity_body": [float(x) for x in s.velocity],
                    "gyro_bias": [float(x) for x in s.gyro_bias],
                    "accel_bias": [float(x) for x in s.accel_bias],
                    "dvl_bias": [float(x) for x in s.dvl_bias],
                }
            )
        return {
            "keyframes": kfs,
            "factors": {
                "prior": len(self._priors),
                "imu": len(self._imu),
                "dvl": len(self._dvl),
                "baro": len(self._baro),
                "registration": len(self._regs),
            },
        }
