"""Shared simulated-survey scenarios for the estimator tests.

The cruise scenario (straight line at constant speed with a constant yaw
rate) makes both IMU channels piecewise constant: the gyro is constant and
the specific force R^T(a - g) = -R^T g is invariant under the yaw rotation.
Zero-order-hold integration is then exact, so noiseless residuals vanish to
machine precision rather than to discretization error.
"""

from __future__ import annotations

import numpy as np

from surfkit.factors import KeyframeState
from surfkit.sensorsim import TrajectorySpec, generate_trajectory


def cruise_trajectory(duration=30.0, yaw_rate=0.12, velocity=(0.4, 0.15, 0.02), origin=(0.0, 0.0, 6.0)):
    t_wp = np.linspace(0.0, duration, 6)
    wps = np.asarray(origin, dtype=float) + np.outer(t_wp, np.asarray(velocity, dtype=float))
    return generate_trajectory(TrajectorySpec(waypoints=wps, duration=duration, yaws=yaw_rate * t_wp))


def survey_trajectory(duration=40.0):
    wps = np.array(
        [
            [0.0, 0.0, 5.0],
            [8.0, 2.0, 6.0],
            [12.0, 10.0, 5.5],
            [4.0, 14.0, 6.5],
            [-2.0, 8.0, 5.0],
        ]
    )
    yaws = np.linspace(0.0, 1.2, len(wps))
    return generate_trajectory(TrajectorySpec(waypoints=wps, duration=duration, yaws=yaws))


def gt_keyframe(traj, t) -> KeyframeState:
    rot = traj.rotation(float(t))
    return KeyframeState(
        rotation=rot,
        position=np.asarray(traj.position(float(t)), dtype=float),
        velocity=np.asarray(traj.body_velocity(float(t)), dtype=float),
        gyro_bias=np.zeros(3),
        accel_bias=np.zeros(3),
        dvl_bias=np.zeros(3),
        timestamp=float(t),
    )


def chunk_between(measurements, t0, t1):
    """Samples stamped in [t0, t1), i.e. the intervals covering [t0, t1]."""
    return [m for m in measurements if t0 - 1e-9 <= m.t < t1 - 1e-9]


def at_time(measurements, t, tol=1e-6):
    for m in measurements:
        if abs(m.t - t) <= tol:
            return m
    raise AssertionError(f"no measurement stamped at t={t}")


def fd_jacobian(fun, state: KeyframeState, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of fun(state) wrt the 18-dim retract."""
    jac = None
    for k in range(18):
        d = np.zeros(18)
        d[k] = h
        rp = np.atleast_1d(np.asarray(fun(state.retract(d)), dtype=float)).ravel()
        rm = np.atleast_1d(np.asarray(fun(state.retract(-d)), dtype=float)).ravel()
        if jac is None:
            jac = np.empty((rp.size, 18))
        jac[:, k] = (rp - rm) / (2.0 * h)
    return jac


def random_keyframe_state(rng: np.random.Generator, timestamp: float = 0.0) -> KeyframeState:
    from surfkit.geom import Rotation

    return KeyframeState(
        rotation=Rotation.from_rotvec(rng.normal(0.0, 0.8, 3)),
        position=rng.normal(0.0, 5.0, 3),
        velocity=rng.normal(0.0, 1.0, 3),
        gyro_bias=rng.normal(0.0, 0.02, 3),
        accel_bias=rng.normal(0.0, 0.05, 3),
        dvl_bias=rng.normal(0.0, 0.02, 3),
        timestamp=timestamp,
    )


def random_preint(rng: np.random.Generator, n: int = 20, rate: float = 200.0):
    """Preintegrated interval from a random (but physically scaled) IMU burst."""
    from surfkit.factors import preintegrate
    from surfkit.sensorsim import ImuMeasurement

    dt = 1.0 / rate
    meas = [
        ImuMeasurement(
            t=k * dt,
            gyro=rng.normal(0.0, 0.3, 3),
            accel=rng.normal(0.0, 1.0, 3) + np.array([0.0, 0.0, -9.81]),
        )
        for k in range(n)
    ]
    return preintegrate(
        meas,
        gyro_bias_ref=rng.normal(0.0, 0.01, 3),
        accel_bias_ref=rng.normal(0.0, 0.02, 3),
        gyro_sigma=1e-3,
        accel_sigma=1e-2,
        end_time=n * dt,
    )
