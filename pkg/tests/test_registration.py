import numpy as np
import pytest

from pixpoint.errors import DegenerateConfigurationError, InvalidInputError, RegistrationFailure
from pixpoint.geometry import CameraIntrinsics, RigidTransform, random_rotation, rodrigues, rotation_angle
from pixpoint.registration import (RansacConfig, _update, pnp_dlt, ransac_pnp, refine_gauss_newton, reprojection_jacobian,
                                   reprojection_residuals, residuals_3d)

K = CameraIntrinsics(60.0, 62.0, 31.5, 30.5, 64, 64)


def scene(seed, n=100, outlier_frac=0.0):
    """Random camera-to-world pose with n points in front of the camera.

    Returns (pose, uv, cam_points, world_points, outlier mask)."""
    rng = np.random.default_rng(seed)
    pose = RigidTransform(random_rotation(rng), rng.normal(size=3))
    z = rng.uniform(1.0, 3.0, n)
    uv = np.stack([rng.uniform(0, 64, n), rng.uniform(0, 64, n)], 1)
    cam = np.stack([(uv[:, 0] - K.cx) * z / K.fx, (uv[:, 1] - K.cy) * z / K.fy, z], 1)
    world = pose.apply(cam)
    out = np.zeros(n, bool)
    out[rng.permutation(n)[:int(round(outlier_frac * n))]] = True
    world[out] = pose.apply(cam[out]) + rng.uniform(-1.5, 1.5, size=(out.sum(), 3))
    return pose, uv, cam, world, out


def pose_error(a: RigidTransform, b: RigidTransform):
    return rotation_angle(a.rotation.T @ b.rotation), float(np.linalg.norm(a.translation - b.translation))


def test_dlt_noiseless():
    for s in range(20):
        pose, uv, _, world, _ = scene(s, 8)
        est = pnp_dlt(uv, world, K)
        r, t = pose_error(est, pose)
        assert r < 1e-6 and t < 1e-6
        assert np.abs(reprojection_residuals(est, uv, world, K)).max() < 1e-6


def test_dlt_degenerate():
    uv = np.random.default_rng(0).uniform(0, 64, size=(8, 2))
    plane = np.c_[np.random.default_rng(1).normal(size=(8, 2)), np.full(8, 2.0)]
    with pytest.raises(DegenerateConfigurationError):
        pnp_dlt(uv, plane, K)
    axis = np.c_[np.zeros((8, 2)), np.linspace(1, 3, 8)]
    with pytest.raises(DegenerateConfigurationError):
        pnp_dlt(uv, axis, K)
    with pytest.raises(InvalidInputError):
        pnp_dlt(uv[:5], plane[:5], K)


def test_jacobian_vs_finite_differences():
    for s in range(20):
        pose, uv, _, world, _ = scene(s, 10)
        J = reprojection_jacobian(pose, world, K)
        fd = np.zeros_like(J)
        for i in range(6):
            d = np.zeros(6)
            d[i] = 1e-6
            fd[:, i] = (reprojection_residuals(_update(pose, d), uv, world, K)
                        - reprojection_residuals(_update(pose, -d), uv, world, K)).reshape(-1) / 2e-6
        # structural zeros of J pick up ~1e-9 rounding noise, hence the floor
        rel = np.abs(J - fd) / np.maximum(1e-2, np.abs(J) + np.abs(fd))
        assert rel.max() < 1e-4


def test_refine_at_truth_and_perturbed():
    pose, uv, _, world, _ = scene(3, 30)
    same = refine_gauss_newton(pose, uv, world, K)
    r, t = pose_error(same, pose)
    assert r < 1e-9 and t < 1e-9
    for s in range(10):
        rng = np.random.default_rng(s)
        w = rng.normal(size=3)
        w *= 0.01 / np.linalg.norm(w)
        dt = rng.normal(size=3)
        dt *= 0.01 / np.linalg.norm(dt)
        start = RigidTransform(rodrigues(w) @ pose.rotation, pose.translation + dt)
        out = refine_gauss_newton(start, uv, world, K)
        assert (reprojection_residuals(out, uv, world, K) ** 2).sum() < 1e-8


def test_refine_never_increases_cost():
    for s in range(10):
        pose, uv, _, world, _ = scene(s, 30)
        noisy = uv + np.random.default_rng(s).normal(0, 0.5, uv.shape)
        start = RigidTransform(pose.rotation, pose.translation + 0.05)
        c0 = (reprojection_residuals(start, noisy, world, K) ** 2).sum()
        c1 = (reprojection_residuals(refine_gauss_newton(start, noisy, world, K), noisy, world, K) ** 2).sum()
        assert c1 <= c0


def test_ransac_noiseless():
    pose, uv, cam, world, _ = scene(0)
    est, inl = ransac_pnp(uv, cam, world, K)
    assert len(inl) == 100
    r, t = pose_error(est, pose)
    assert r < 1e-6 and t < 1e-6


def test_ransac_with_outliers():
    ok = 0
    for s in range(50):
        pose, uv, cam, world, out = scene(1000 + s, 100, 0.3)
        try:
            est, inl = ransac_pnp(uv, cam, world, K, RansacConfig(seed=s))
        except RegistrationFailure:
            continue
        r, t = pose_error(est, pose)
        ok += (r < 1e-3 and t < 1e-3)
    assert ok >= 49


def test_ransac_inlier_invariants_and_determinism():
    pose, uv, cam, world, out = scene(7, 100, 0.3)
    cfg = RansacConfig(seed=3)
    est, inl = ransac_pnp(uv, cam, world, K, cfg)
    res = residuals_3d(est, cam, world)
    assert np.all(res[inl] < cfg.inlier_threshold)
    rest = np.setdiff1d(np.arange(100), inl)
    assert not np.any(res[rest] < cfg.inlier_threshold / 2)
    est2, inl2 = ransac_pnp(uv, cam, world, K, cfg)
    assert est2.matrix.tobytes() == est.matrix.tobytes()
    np.testing.assert_array_equal(inl, inl2)


def test_ransac_failure():
    rng = np.random.default_rng(0)
    uv = rng.uniform(0, 64, size=(40, 2))
    cam = rng.uniform(-1, 1, size=(40, 3)) + [0, 0, 2]
    world = rng.uniform(-50, 50, size=(40, 3))
    with pytest.raises(RegistrationFailure):
        ransac_pnp(uv, cam, world, K, RansacConfig(max_iterations=200))
    with pytest.raises(RegistrationFailure):
        ransac_pnp(uv[:4], cam[:4], world[:4], K)


def test_ransac_config_validation():
    with pytest.raises(InvalidInputError):
        RansacConfig(sample_size=5)
    with pytest.raises(InvalidInputError):
        RansacConfig(confidence=1.0)
    c = RansacConfig()
    assert (c.max_iterations, c.sample_size, c.inlier_threshold, c.confidence) == (1000, 6, 0.045, 0.999)
