import numpy as np
import pytest

from surfkit.camera import CameraIntrinsics, StereoCalib
from surfkit.geom import Pose, Rotation, se3_log
from surfkit.losses import warp_image
from surfkit.sensorsim import (
    GRAVITY_W,
    NoiseConfig,
    ScenePrimitive,
    TrajectorySpec,
    generate_trajectory,
    primitive_albedo,
    raycast_depth,
    render_stereo_pair,
    synthesize_baro,
    synthesize_dvl,
    synthesize_imu,
    synthesize_registrations,
)


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


def stationary_trajectory(yaw=0.0):
    wps = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    return generate_trajectory(
        TrajectorySpec(waypoints=wps, duration=10.0, yaws=np.array([yaw, yaw]))
    )


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------


def test_trajectory_requires_two_waypoints():
    with pytest.raises(ValueError):
        generate_trajectory(TrajectorySpec(waypoints=np.zeros((1, 3)), duration=1.0))
    with pytest.raises(ValueError):
        generate_trajectory(TrajectorySpec(waypoints=np.zeros((2, 3)), duration=0.0))


def test_stationary_trajectory_zero_motion():
    traj = stationary_trajectory()
    ts = np.linspace(0.0, 10.0, 23)
    assert np.allclose(traj.velocity(ts), 0.0, atol=1e-12)
    assert np.allclose(traj.acceleration(ts), 0.0, atol=1e-12)
    assert np.allclose(traj.position(5.0), [1.0, 2.0, 3.0])


def test_velocity_matches_position_derivative():
    traj = survey_trajectory()
    h = 1e-6
    for t in np.linspace(0.5, 39.5, 17):
        fd = (traj.position(t + h) - traj.position(t - h)) / (2 * h)
        assert np.allclose(fd, traj.velocity(t), atol=1e-5)


def test_acceleration_matches_velocity_derivative():
    traj = survey_trajectory()
    h = 1e-6
    for t in np.linspace(0.5, 39.5, 17):
        fd = (traj.velocity(t + h) - traj.velocity(t - h)) / (2 * h)
        assert np.allclose(fd, traj.acceleration(t), atol=1e-4)


def test_acceleration_continuous_at_knots():
    traj = survey_trajectory()
    eps = 1e-7
    for knot in np.linspace(0.0, 40.0, 5)[1:-1]:
        jump = traj.acceleration(knot + eps) - traj.acceleration(knot - eps)
        assert np.linalg.norm(jump) < 1e-4


def test_yaw_rotation_and_body_velocity():
    traj = survey_trajectory()
    for t in [3.0, 17.5, 31.0]:
        rv = traj.rotation(t).as_rotvec()
        assert abs(rv[0]) < 1e-12 and abs(rv[1]) < 1e-12
        v_b = traj.body_velocity(t)
        expected = traj.rotation(t).inverse().apply(traj.velocity(t))
        assert np.allclose(v_b, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# IMU
# ---------------------------------------------------------------------------


def test_imu_stationary_level_reads_gravity():
    traj = stationary_trajectory()
    meas = synthesize_imu(traj, NoiseConfig.noiseless())
    assert len(meas) == 2000
    for m in meas[:: len(meas) // 7]:
        assert np.allclose(m.accel, [0.0, 0.0, -9.81], atol=1e-12)
        assert np.allclose(m.gyro, 0.0, atol=1e-12)


def test_imu_stationary_yawed_reads_gravity():
    traj = stationary_trajectory(yaw=np.pi / 4)
    meas = synthesize_imu(traj, NoiseConfig.noiseless())
    assert np.allclose(meas[100].accel, [0.0, 0.0, -9.81], atol=1e-12)


def test_imu_matches_formula():
    traj = survey_trajectory()
    noise = NoiseConfig.noiseless()
    noise.accel_bias = (0.01, -0.02, 0.03)
    noise.gyro_bias = (0.001, 0.002, -0.001)
    meas = synthesize_imu(traj, noise)
    dt = 1.0 / 200.0
    for k in [0, 7, 1234, len(meas) - 1]:
        tm = meas[k].t + 0.5 * dt
        rot = traj.rotation(tm)
        f = rot.inverse().apply(traj.acceleration(tm) - GRAVITY_W)
        assert np.allclose(meas[k].accel, f + noise.accel_bias, atol=1e-10)
        assert np.allclose(
            meas[k].gyro, traj.angular_velocity_body(tm) + noise.gyro_bias, atol=1e-10
        )


def test_imu_sample_count_and_timestamps():
    wps = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    traj = generate_trajectory(TrajectorySpec(waypoints=wps, duration=2.0))
    meas = synthesize_imu(traj, NoiseConfig.noiseless())
    assert len(meas) == 400
    assert meas[0].t == 0.0
    assert abs(meas[399].t - 1.995) < 1e-12


def test_imu_noise_statistics():
    wps = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    traj = generate_trajectory(TrajectorySpec(waypoints=wps, duration=50.0))
    noise = NoiseConfig(accel_sigma=0.02, gyro_sigma=0.002, seed=3)
    meas = synthesize_imu(traj, noise)
    accel = np.array([m.accel for m in meas]) - np.array([0.0, 0.0, -9.81])
    gyro = np.array([m.gyro for m in meas])
    n = len(meas)
    assert abs(accel.std() - 0.02) < 0.05 * 0.02
    assert abs(gyro.std() - 0.002) < 0.05 * 0.002
    assert np.all(np.abs(accel.mean(axis=0)) < 5 * 0.02 / np.sqrt(n))
    assert np.all(np.abs(gyro.mean(axis=0)) < 5 * 0.002 / np.sqrt(n))


def test_imu_bias_random_walk():
    traj = stationary_trajectory()
    noise = NoiseConfig.noiseless()
    noise.gyro_bias = (0.001, 0.0, 0.0)
    noise.gyro_bias_rw = 0.01
    noise.seed = 11
    meas = synthesize_imu(traj, noise)
    gyro = np.array([m.gyro for m in meas])
    assert np.allclose(gyro[0], [0.001, 0.0, 0.0], atol=1e-15)
    steps = np.diff(gyro, axis=0)
    expected = 0.01 * np.sqrt(1.0 / 200.0)
    assert abs(steps.std() - expected) < 0.1 * expected


def test_imu_determinism():
    traj = survey_trajectory()
    a = synthesize_imu(traj, NoiseConfig(seed=5))
    b = synthesize_imu(traj, NoiseConfig(seed=5))
    c = synthesize_imu(traj, NoiseConfig(seed=6))
    assert all(np.array_equal(x.accel, y.accel) for x, y in zip(a, b))
    assert all(np.array_equal(x.gyro, y.gyro) for x, y in zip(a, b))
    assert not np.allclose(a[0].accel, c[0].accel)


# ---------------------------------------------------------------------------
# DVL / baro
# ---------------------------------------------------------------------------


def test_dvl_noiseless_matches_formula():
    traj = survey_trajectory()
    t_bd = Pose(Rotation.from_rotvec(np.array([0.17, 0.0, 0.0])), np.array([0.2, 0.0, 0.1]))
    meas = synthesize_dvl(traj, NoiseConfig.noiseless(), extrinsics=t_bd)
    for m in meas[:: len(meas) // 9]:
        v_b = traj.body_velocity(m.t)
        omega = traj.angular_velocity_body(m.t)
        expected = t_bd.rotation.inverse().apply(v_b + np.cross(omega, t_bd.translation))
        assert np.allclose(m.velocity, expected, atol=1e-10)


def test_dvl_rate_and_count():
    wps = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    traj = generate_trajectory(TrajectorySpec(waypoints=wps, duration=2.0))
    meas = synthesize_dvl(traj, NoiseConfig.noiseless())
    assert len(meas) == 17
    assert meas[1].t == 0.125


def test_dvl_lever_arm_adds_rotation_coupling():
    wps = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    yaws = np.array([0.0, 2.0])  # pure spin in place
    traj = generate_trajectory(TrajectorySpec(waypoints=wps, duration=10.0, yaws=yaws))
    t_bd = Pose(Rotation.identity(), np.array([0.5, 0.0, 0.0]))
    with_arm = synthesize_dvl(traj, NoiseConfig.noiseless(), extrinsics=t_bd)
    without = synthesize_dvl(traj, NoiseConfig.noiseless())
    m = with_arm[40]
    omega = traj.angular_velocity_body(m.t)
    coupling = np.cross(omega, np.array([0.5, 0.0, 0.0]))
    assert np.allclose(m.velocity - without[40].velocity, coupling, atol=1e-10)
    assert np.linalg.norm(coupling) > 1e-3


def test_baro_noiseless_and_noise():
    traj = survey_trajectory()
    clean = synthesize_baro(traj, NoiseConfig.noiseless())
    assert len(clean) == 201
    for m in clean[:: len(clean) // 9]:
        assert abs(m.depth - traj.position(m.t)[2]) < 1e-10
    noisy_a = synthesize_baro(traj, NoiseConfig(baro_sigma=0.05, seed=2))
    noisy_b = synthesize_baro(traj, NoiseConfig(baro_sigma=0.05, seed=2))
    assert all(x.depth == y.depth for x, y in zip(noisy_a, noisy_b))
    resid = np.array([m.depth - traj.position(m.t)[2] for m in noisy_a])
    assert abs(resid.std() - 0.05) < 0.015


# ---------------------------------------------------------------------------
# raycasting
# ---------------------------------------------------------------------------

INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0)
SHAPE = (48, 64)


def test_raycast_plane_fronto_constant_depth():
    scene = [ScenePrimitive(kind="plane", point=(0.0, 0.0, 5.0), normal=(0.0, 0.0, -1.0))]
    depth, albedo = raycast_depth(scene, Pose.identity(), INTR, SHAPE)
    assert np.allclose(depth, 5.0, atol=1e-12)
    assert albedo.min() >= 0.1 and albedo.max() <= 0.95


def test_raycast_plane_slanted_matches_formula():
    n = np.array([0.3, -0.1, -1.0])
    n = n / np.linalg.norm(n)
    q = np.array([0.0, 0.0, 4.0])
    scene = [ScenePrimitive(kind="plane", point=tuple(q), normal=tuple(n))]
    pose = Pose(Rotation.from_rotvec(np.array([0.0, 0.0, 0.3])), np.array([0.5, -0.2, 0.0]))
    depth, _ = raycast_depth(scene, pose, INTR, SHAPE)
    dirs = INTR.ray_grid(*SHAPE) @ pose.rotation.as_matrix().T
    expected = ((q - pose.translation) @ n) / (dirs @ n)
    expected = np.where(expected > 0, expected, np.nan)
    assert np.allclose(depth, expected, atol=1e-9, equal_nan=True)


def test_raycast_sphere_center_and_miss():
    scene = [ScenePrimitive(kind="sphere", center=(0.0, 0.0, 10.0), radius=2.0)]
    depth, _ = raycast_depth(scene, Pose.identity(), INTR, SHAPE)
    assert abs(depth[24, 32] - 8.0) < 1e-12
    assert np.isnan(depth[0, 0])


def test_raycast_box_center_and_inside():
    scene = [
        ScenePrimitive(kind="box", center=(0.0, 0.0, 10.0), half_extents=(1.0, 1.0, 1.0))
    ]
    depth, _ = raycast_depth(scene, Pose.identity(), INTR, SHAPE)
    assert abs(depth[24, 32] - 9.0) < 1e-12
    inside = Pose(Rotation.identity(), np.array([0.0, 0.0, 10.0]))
    depth_in, _ = raycast_depth(scene, inside, INTR, SHAPE)
    assert np.all(np.isnan(depth_in))


def test_raycast_heightfield_matches_plane():
    grid = np.linspace(-30.0, 30.0, 61)
    flat = np.full((61, 61), 5.0)
    hf = [
        ScenePrimitive(
            kind="heightfield", origin_xy=(-30.0, -30.0), cell_xy=(1.0, 1.0), heights=flat
        )
    ]
    depth_hf, _ = raycast_depth(hf, Pose.identity(), INTR, SHAPE)
    assert np.allclose(depth_hf, 5.0, atol=1e-9)

    sloped = 5.0 + 0.2 * grid[:, None] + 0.0 * grid[None, :]
    hf_slope = [
        ScenePrimitive(
            kind="heightfield", origin_xy=(-30.0, -30.0), cell_xy=(1.0, 1.0), heights=sloped
        )
    ]
    n = np.array([-0.2, 0.0, 1.0])
    plane = [ScenePrimitive(kind="plane", point=(0.0, 0.0, 5.0), normal=tuple(n))]
    d_hf, _ = raycast_depth(hf_slope, Pose.identity(), INTR, SHAPE)
    d_pl, _ = raycast_depth(plane, Pose.identity(), INTR, SHAPE)
    assert np.allclose(d_hf, d_pl, atol=1e-7, equal_nan=True)


def test_raycast_miss_is_nan():
    scene = [ScenePrimitive(kind="plane", point=(0.0, 0.0, 5.0), normal=(0.0, 0.0, -1.0))]
    up = Pose(Rotation.from_rotvec(np.array([np.pi, 0.0, 0.0])), np.zeros(3))
    depth, albedo = raycast_depth(scene, up, INTR, SHAPE)
    assert np.all(np.isnan(depth))
    assert np.all(albedo == 0.0)


def test_raycast_nearest_primitive_wins():
    scene = [
        ScenePrimitive(kind="plane", point=(0.0, 0.0, 5.0), normal=(0.0, 0.0, -1.0), texture_id=0),
        ScenePrimitive(kind="plane", point=(0.0, 0.0, 3.0), normal=(0.0, 0.0, -1.0), texture_id=1),
    ]
    depth, _ = raycast_depth(scene, Pose.identity(), INTR, SHAPE)
    assert np.allclose(depth, 3.0, atol=1e-12)


def test_primitive_albedo_deterministic_and_distinct():
    pts = np.random.default_rng(0).uniform(-5, 5, size=(100, 3))
    a = primitive_albedo(pts, 2)
    b = primitive_albedo(pts, 2)
    c = primitive_albedo(pts, 3)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert a.min() >= 0.1 and a.max() <= 0.95


def test_invalid_primitive_kind_raises():
    with pytest.raises(ValueError, match="kind"):
        ScenePrimitive(kind="torus")


# ---------------------------------------------------------------------------
# stereo rendering
# ---------------------------------------------------------------------------


def test_stereo_pair_disparity_and_photometric_consistency():
    calib = StereoCalib(fx=100.0, fy=100.0, cx=32.0, cy=24.0, baseline=0.5)
    scene = [ScenePrimitive(kind="plane", point=(0.0, 0.0, 5.0), normal=(0.0, 0.0, -1.0))]
    left, right, depth_l, depth_r, disp = render_stereo_pair(scene, Pose.identity(), calib, SHAPE)
    assert np.allclose(disp, 10.0, atol=1e-12)
    assert np.allclose(depth_r, 5.0, atol=1e-12)
    synth, valid = warp_image(right, disp, direction="to_left")
    assert valid.sum() > 0.7 * valid.size
    err = np.abs(synth - left)[valid].max()
    assert err < 1e-3


def test_stereo_pair_sloped_scene_consistency():
    calib = StereoCalib(fx=120.0, fy=120.0, cx=32.0, cy=24.0, baseline=0.3)
    scene = [ScenePrimitive(kind="plane", point=(0.0, 0.0, 6.0), normal=(0.25, 0.1, -1.0))]
    left, right, depth_l, _, disp = render_stereo_pair(scene, Pose.identity(), calib, SHAPE)
    assert np.allclose(disp, calib.fx * calib.baseline / depth_l, equal_nan=True)
    synth, valid = warp_image(right, disp, direction="to_left")
    err = np.abs(synth - left)[valid].max()
    assert err < 1e-3


# ---------------------------------------------------------------------------
# loop-closure candidates
# ---------------------------------------------------------------------------

T_BC = Pose(Rotation.from_rotvec(np.array([0.0, 1.2, 0.0])), np.array([0.3, 0.0, 0.2]))


def _candidate_error(traj, kf_times, cand):
    cam_q = traj.pose(kf_times[cand.query_id]) @ T_BC
    cam_m = traj.pose(kf_times[cand.match_id]) @ T_BC
    truth = cam_q.inverse() @ cam_m
    dev = truth.inverse() @ cand.transform
    xi = se3_log(dev)
    return np.linalg.norm(xi[:3]), np.linalg.norm(dev.translation)


def test_registration_age_and_error_separation():
    traj = survey_trajectory(duration=120.0)
    kf_times = np.arange(0.0, 121.0, 1.0)
    cands = synthesize_registrations(
        traj, kf_times, T_BC, count=300, noise=NoiseConfig(seed=9), outlier_rate=0.25
    )
    assert len(cands) == 300
    n_out = 0
    for c in cands:
        assert kf_times[c.query_id] - kf_times[c.match_id] >= 20.0
        ang, dist = _candidate_error(traj, kf_times, c)
        if c.is_outlier:
            n_out += 1
            assert ang >= np.deg2rad(30.0) or dist >= 2.0
        else:
            assert ang < 0.05 and dist < 0.1
    assert 40 <= n_out <= 110


def test_registration_determinism():
    traj = survey_trajectory(duration=80.0)
    kf_times = np.arange(0.0, 81.0, 1.0)
    a = synthesize_registrations(traj, kf_times, T_BC, 50, NoiseConfig(seed=4))
    b = synthesize_registrations(traj, kf_times, T_BC, 50, NoiseConfig(seed=4))
    c = synthesize_registrations(traj, kf_times, T_BC, 50, NoiseConfig(seed=5))
    for x, y in zip(a, b):
        assert x.query_id == y.query_id and x.match_id == y.match_id
        assert np.array_equal(x.transform.as_matrix(), y.transform.as_matrix())
    assert any(
        x.query_id != y.query_id or not np.allclose(x.transform.as_matrix(), y.transform.as_matrix())
        for x, y in zip(a, c)
    )


def test_registration_empty_when_too_short():
    traj = survey_trajectory(duration=10.0)
    kf_times = np.arange(0.0, 11.0, 1.0)
    assert synthesize_registrations(traj, kf_times, T_BC, 10, NoiseConfig(seed=0)) == []
