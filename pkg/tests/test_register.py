"""Tests for correspondence lifting, RANSAC alignment, and GICP refinement."""

import numpy as np
import pytest

from surfkit.camera import CameraIntrinsics
from surfkit.geom import Pose, Rotation, se3_exp
from surfkit.register import (
    Correspondences,
    RegisterConfig,
    RegistrationRejected,
    cloud_from_depth,
    estimate_rigid_ransac,
    gicp_refine,
    lift_correspondences,
    register_pair,
)
from surfkit.sensorsim import ScenePrimitive, raycast_depth

INTR = CameraIntrinsics(fx=110.0, fy=110.0, cx=59.5, cy=44.5)
SHAPE = (90, 120)
SCENE = [
    ScenePrimitive(kind="plane", point=(0.0, 0.0, 8.0), normal=(0.0, 0.0, -1.0), texture_id=1),
    ScenePrimitive(kind="sphere", center=(0.5, 0.3, 7.4), radius=0.6, texture_id=2),
    ScenePrimitive(kind="box", center=(-0.8, -0.5, 7.6), half_extents=(0.4, 0.5, 0.35), texture_id=3),
]
POSE0 = Pose(Rotation.identity(), np.array([0.0, 0.0, 5.0]))


def scene_depth(pose: Pose, scene=SCENE) -> np.ndarray:
    return raycast_depth(scene, pose, INTR, SHAPE)[0]


def rot_err(a: Rotation, b: Rotation) -> float:
    return float(np.linalg.norm((a.inverse() @ b).as_rotvec()))


def random_correspondences(rng, n=200):
    pts = np.stack(
        [rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 8, n)], axis=1
    )
    truth = Pose(Rotation.from_rotvec(np.array([0.1, -0.2, 0.3])), np.array([0.4, -0.3, 0.2]))
    return Correspondences(truth.apply(pts), pts), truth


# ---------------------------------------------------------------------------
# lifting
# ---------------------------------------------------------------------------


def test_lift_pinhole_examples():
    intr = CameraIntrinsics(fx=1.0, fy=1.0, cx=3.0, cy=2.0)
    depth_q = np.full((5, 7), 2.0)
    depth_m = np.full((5, 7), 1.0)
    matches = [((3, 2), (3, 2)), ((4, 2), (4, 2))]
    corr = lift_correspondences(matches, depth_q, depth_m, intr)
    assert len(corr) == 2
    np.testing.assert_allclose(corr.point_q[0], [0.0, 0.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(corr.point_m[0], [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(corr.point_m[1], [1.0, 0.0, 1.0], atol=1e-12)  # (cx+fx, cy), z=1


def test_lift_drops_invalid_pairs():
    intr = CameraIntrinsics(fx=1.0, fy=1.0, cx=3.0, cy=2.0)
    depth_q = np.full((5, 7), 2.0)
    depth_m = np.full((5, 7), 1.0)
    depth_q[2, 5] = np.nan
    depth_m[1, 1] = -0.5
    matches = [
        ((5, 2), (3, 2)),  # NaN query depth
        ((3, 2), (1, 1)),  # non-positive match depth
        ((100, 100), (3, 2)),  # out of bounds
        ((3, 2), (3, 2)),  # good
    ]
    corr = lift_correspondences(matches, depth_q, depth_m, intr)
    assert len(corr) == 1
    assert np.isfinite(corr.point_q).all() and np.isfinite(corr.point_m).all()


def test_lift_empty_input():
    corr = lift_correspondences([], np.ones((4, 4)), np.ones((4, 4)), INTR)
    assert len(corr) == 0


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


def test_ransac_recovers_noiseless_transform():
    corr, truth = random_correspondences(np.random.default_rng(0))
    res = estimate_rigid_ransac(corr)
    assert res.inlier_ratio == 1.0
    assert res.inlier_count == len(corr)
    assert res.rms < 1e-9
    assert rot_err(res.transform.rotation, truth.rotation) < 1e-9
    assert np.linalg.norm(res.transform.translation - truth.translation) < 1e-9
    r = res.transform.rotation.as_matrix()
    assert np.abs(r @ r.T - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_ransac_survives_forty_percent_contamination():
    recovered = 0
    for seed in range(30):
        rng = np.random.default_rng(100 + seed)
        corr, truth = random_correspondences(rng)
        n_bad = int(0.4 * len(corr))
        bad = rng.permutation(len(corr))[:n_bad]
        corr.point_q[bad] = rng.uniform(-10, 10, (n_bad, 3))
        res = estimate_rigid_ransac(corr, RegisterConfig(seed=seed))
        ok = (
            rot_err(res.transform.rotation, truth.rotation) < 1e-6
            and np.linalg.norm(res.transform.translation - truth.translation) < 1e-6
        )
        recovered += ok
    assert recovered >= 29


def test_ransac_rejects_structureless_matches():
    rng = np.random.default_rng(7)
    corr = Correspondences(rng.uniform(-3, 3, (50, 3)), rng.uniform(-3, 3, (50, 3)))
    with pytest.raises(RegistrationRejected) as exc:
        estimate_rigid_ransac(corr)
    assert exc.value.reason == "insufficient-inliers"


def test_ransac_needs_three_points():
    corr = Correspondences(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(RegistrationRejected) as exc:
        estimate_rigid_ransac(corr)
    assert exc.value.reason == "insufficient-correspondences"


def test_ransac_deterministic_per_seed():
    rng = np.random.default_rng(1)
    corr, _ = random_correspondences(rng)
    bad = rng.permutation(len(corr))[:60]
    corr.point_q[bad] = rng.uniform(-10, 10, (60, 3))
    a = estimate_rigid_ransac(corr, RegisterConfig(seed=4))
    b = estimate_rigid_ransac(corr, RegisterConfig(seed=4))
    np.testing.assert_array_equal(a.transform.as_matrix(), b.transform.as_matrix())
    assert a.inlier_count == b.inlier_count


# ---------------------------------------------------------------------------
# GICP
# ---------------------------------------------------------------------------


def test_gicp_identity_on_identical_clouds():
    cloud = cloud_from_depth(scene_depth(POSE0), INTR, stride=2)
    res = gicp_refine(cloud, cloud, Pose.identity())
    assert res.converged
    assert res.rms < 1e-9
    assert np.linalg.norm(res.transform.translation) < 1e-6
    assert np.linalg.norm(res.transform.rotation.as_rotvec()) < 1e-6
    assert res.covariance is not None
    assert np.linalg.eigvalsh(res.covariance).min() > 0


def test_gicp_recovers_known_offset():
    cloud = cloud_from_depth(scene_depth(POSE0), INTR, stride=2)
    truth = Pose(Rotation.from_rotvec(np.array([0.06, 0.10, 0.12])), np.array([0.2, -0.15, 0.1]))
    dst = truth.apply(cloud)
    init = truth @ se3_exp(np.array([0.004, -0.006, 0.005, 0.015, -0.01, 0.02]))
    res = gicp_refine(cloud, dst, init)
    assert res.converged
    assert rot_err(res.transform.rotation, truth.rotation) < np.deg2rad(0.1)
    assert np.linalg.norm(res.transform.translation - truth.translation) < 1e-3
    r = res.transform.rotation.as_matrix()
    assert np.abs(r @ r.T - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(r) - 1.0) < 1e-9
    # accepted Gauss-Newton steps never increase that iteration's objective
    assert all(after <= before + 1e-9 for before, after in res.objective_history)


def test_gicp_tolerates_measurement_noise():
    rng = np.random.default_rng(13)
    cloud = cloud_from_depth(scene_depth(POSE0), INTR, stride=2)
    truth = Pose(Rotation.from_rotvec(np.array([0.0, 0.05, 0.08])), np.array([0.1, 0.05, -0.05]))
    dst = truth.apply(cloud) + rng.normal(0.0, 0.005, cloud.shape)
    res = gicp_refine(cloud, dst, truth @ se3_exp(0.01 * np.ones(6)))
    assert res.converged
    assert res.rms <= 3 * 0.005


def test_gicp_flags_rank_deficient_geometry():
    plane_cloud = cloud_from_depth(scene_depth(POSE0, scene=SCENE[:1]), INTR, stride=2)
    res = gicp_refine(plane_cloud, plane_cloud, Pose.identity())
    assert not res.converged
    assert res.covariance is None


def test_gicp_input_validation():
    cloud = cloud_from_depth(scene_depth(POSE0), INTR, stride=2)
    with pytest.raises(ValueError):
        gicp_refine(cloud[:5], cloud, Pose.identity())
    bad = Pose(Rotation.identity(), np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        gicp_refine(cloud, cloud, bad)


def test_gicp_equivariance_under_common_rigid_motion():
    cloud = cloud_from_depth(scene_depth(POSE0), INTR, stride=2)
    truth = Pose(Rotation.from_rotvec(np.array([0.05, 0.08, -0.04])), np.array([0.15, -0.1, 0.05]))
    dst = truth.apply(cloud)
    init = truth @ se3_exp(np.array([0.003, 0.004, -0.002, 0.01, -0.015, 0.02]))
    base = gicp_refine(cloud, dst, init)

    g = Pose(Rotation.from_rotvec(np.array([0.3, -0.2, 0.5])), np.array([4.0, -3.0, 2.0]))
    conj = gicp_refine(g.apply(cloud), g.apply(dst), g @ init @ g.inverse())
    expected = g @ base.transform @ g.inverse()
    assert rot_err(conj.transform.rotation, expected.rotation) < 1e-6
    assert np.linalg.norm(conj.transform.translation - expected.translation) < 1e-6


def test_ransac_equivariance_under_common_rigid_motion():
    corr, _ = random_correspondences(np.random.default_rng(3))
    base = estimate_rigid_ransac(corr, RegisterConfig(seed=2))
    g = Pose(Rotation.from_rotvec(np.array([-0.4, 0.1, 0.2])), np.array([1.0, 2.0, -3.0]))
    conj_corr = Correspondences(g.apply(corr.point_q), g.apply(corr.point_m))
    conj = estimate_rigid_ransac(conj_corr, RegisterConfig(seed=2))
    expected = g @ base.transform @ g.inverse()
    assert rot_err(conj.transform.rotation, expected.rotation) < 1e-6
    assert np.linalg.norm(conj.transform.translation - expected.translation) < 1e-6


# ---------------------------------------------------------------------------
# full pairwise pipeline
# ---------------------------------------------------------------------------


def grid_matches(depth, step=6):
    """Self-matches on a pixel grid wherever the depth is valid."""
    h, w = depth.shape
    out = []
    for v in range(2, h - 2, step):
        for u in range(2, w - 2, step):
            if np.isfinite(depth[v, u]):
                out.append(((u, v), (u, v)))
    return out


def ground_truth_matches(pose_q, pose_m, depth_q, depth_m, step=4):
    """Project match-frame pixels into the query frame with visibility checks."""
    out = []
    h, w = depth_m.shape
    for v in range(0, h, step):
        for u in range(0, w, step):
            z = depth_m[v, u]
            if not np.isfinite(z):
                continue
            p_m = np.array([(u - INTR.cx) / INTR.fx * z, (v - INTR.cy) / INTR.fy * z, z])
            p_q = (pose_q.inverse() @ pose_m).apply(p_m)
            if p_q[2] <= 0:
                continue
            uq = INTR.fx * p_q[0] / p_q[2] + INTR.cx
            vq = INTR.fy * p_q[1] / p_q[2] + INTR.cy
            iq, jq = int(round(uq)), int(round(vq))
            if not (0 <= iq < w and 0 <= jq < h):
                continue
            zq = depth_q[jq, iq]
            if np.isfinite(zq) and abs(zq - p_q[2]) < 0.01 * p_q[2]:
                out.append(((uq, vq), (u, v)))
    return out


def test_register_pair_identical_frames():
    depth = scene_depth(POSE0)
    res = register_pair(depth, depth, grid_matches(depth), INTR, RegisterConfig(cloud_stride=2))
    assert res.converged
    assert np.linalg.norm(res.transform.translation) < 1e-6
    assert np.linalg.norm(res.transform.rotation.as_rotvec()) < 1e-6


def test_register_pair_recovers_relative_pose():
    pose_q = POSE0
    pose_m = Pose(Rotation.from_rotvec(np.array([0.02, -0.03, 0.1])), np.array([0.4, 0.2, 5.1]))
    depth_q, depth_m = scene_depth(pose_q), scene_depth(pose_m)
    matches = ground_truth_matches(pose_q, pose_m, depth_q, depth_m)
    assert len(matches) > 50
    res = register_pair(depth_q, depth_m, matches, INTR, RegisterConfig(cloud_stride=2))
    truth = pose_q.inverse() @ pose_m
    assert np.linalg.norm(res.transform.translation - truth.translation) < 1e-2
    assert rot_err(res.transform.rotation, truth.rotation) < 1e-2


def test_register_pair_rejects_random_matches():
    pose_m = Pose(Rotation.from_rotvec(np.array([0.0, 0.0, 0.4])), np.array([1.5, -1.0, 5.3]))
    depth_q, depth_m = scene_depth(POSE0), scene_depth(pose_m)
    h, w = depth_q.shape
    for trial in range(10):
        rng = np.random.default_rng(500 + trial)
        matches = np.stack(
            [rng.uniform(0, w - 1, (60, 2)), rng.uniform(0, h - 1, (60, 2))], axis=2
        )
        with pytest.raises(RegistrationRejected) as exc:
            register_pair(depth_q, depth_m, matches, INTR, RegisterConfig(seed=trial, cloud_stride=2))
        assert exc.value.reason == "ransac-failed"


def test_register_pair_too_few_matches():
    depth = scene_depth(POSE0)
    with pytest.raises(RegistrationRejected) as exc:
        register_pair(depth, depth, grid_matches(depth)[:5], INTR)
    assert exc.value.reason == "too-few-matches"


def test_register_pair_flags_degenerate_refinement():
    depth = scene_depth(POSE0, scene=SCENE[:1])  # featureless plane
    with pytest.raises(RegistrationRejected) as exc:
        register_pair(depth, depth, grid_matches(depth), INTR, RegisterConfig(cloud_stride=2))
    assert exc.value.reason == "gicp-diverged"
