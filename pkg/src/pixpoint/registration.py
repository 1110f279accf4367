"""Camera pose from pixel <-> point matches: linear DLT inside RANSAC, then
Gauss-Newton refinement of the reprojection error.

Poses returned here map camera coordinates to the cloud (world) frame,
matching the convention of the rest of the package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfigurationError, InvalidInputError, RegistrationFailure
from .geometry import CameraIntrinsics, RigidTransform, nearest_rotation, rodrigues


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 1000
    sample_size: int = 6
    inlier_threshold: float = 0.045
    confidence: float = 0.999
    refine_iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.sample_size < 6 or self.inlier_threshold <= 0 or self.max_iterations < 1:
            raise InvalidInputError("invalid RANSAC configuration")
        if not 0 < self.confidence < 1:
            raise InvalidInputError("confidence must lie in (0, 1)")


def _rays(uv, k: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy], axis=1)


def pnp_dlt(uv, X, k: CameraIntrinsics) -> RigidTransform:
    """Linear pose from >= 6 non-coplanar correspondences.

    uv: (N, 2) pixels; X: (N, 3) world points. The rotation block is projected
    onto SO(3).
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    n = len(X)
    if n < 6 or len(uv) != n:
        raise InvalidInputError("DLT needs at least 6 matched pairs")
    c = X.mean(axis=0)
    Xc = X - c
    spread = np.sqrt((Xc ** 2).sum(1)).mean()
    if spread == 0:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(3.0) / spread
    Xn = Xc * s
    sv_pts = np.linalg.svd(Xn, compute_uv=False)
    if sv_pts[-1] < 1e-9 * sv_pts[0]:
        raise DegenerateConfigurationError("points are coplanar or collinear")
    xy = _rays(uv, k)
    Xh = np.hstack([Xn, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xy[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xy[:, 1:] * Xh
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("DLT system is rank deficient")
    P = Vt[-1].reshape(3, 4)
    M, p = P[:, :3], P[:, 3]
    if np.linalg.det(M) < 0:
        M, p = -M, -p
    U, S, Vt3 = np.linalg.svd(M)
    R = nearest_rotation(U @ Vt3)
    lam = S.mean()
    t = p / (lam * s) - R @ c
    return RigidTransform(R, t).inverse()


def reprojection_residuals(pose: RigidTransform, uv, X, k: CameraIntrinsics) -> np.ndarray:
    """(N, 2) projected-minus-observed pixel residuals for a camera-to-world pose."""
    Xc = pose.inverse().apply(X)
    proj = np.stack([k.fx * Xc[:, 0] / Xc[:, 2] + k.cx, k.fy * Xc[:, 1] / Xc[:, 2] + k.cy], axis=1)
    return proj - np.asarray(uv, dtype=np.float64)


def reprojection_jacobian(pose: RigidTransform, X, k: CameraIntrinsics) -> np.ndarray:
    """(2N, 6) Jacobian of the residuals w.r.t. a left update (w, v) of the world-to-camera pose:
    Xc -> exp([w]) Xc + v."""
    Xc = pose.inverse().apply(X)
    x, y, z = Xc.T
    J = np.zeros((len(Xc), 2, 6))
    dproj = np.zeros((len(Xc), 2, 3))
    dproj[:, 0, 0] = k.fx / z
    dproj[:, 0, 2] = -k.fx * x / z ** 2
    dproj[:, 1, 1] = k.fy / z
    dproj[:, 1, 2] = -k.fy * y / z ** 2
    skew = np.zeros((len(Xc), 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -z, y
    skew[:, 1, 0], skew[:, 1, 2] = z, -x
    skew[:, 2, 0], skew[:, 2, 1] = -y, x
    J[:, :, :3] = -dproj @ skew
    J[:, :, 3:] = dproj
    return J.reshape(-1, 6)


def _update(pose: RigidTransform, delta) -> RigidTransform:
    cw = pose.inverse()
    dR = rodrigues(delta[:3])
    R = nearest_rotation(dR @ cw.rotation)
    return RigidTransform(R, dR @ cw.translation + delta[3:]).inverse()


def _cost(pose, uv, X, k):
    r = reprojection_residuals(pose, uv, X, k)
    return float((r ** 2).sum())


def refine_gauss_newton(initial: RigidTransform, uv, X, k: CameraIntrinsics, iterations: int = 10) -> RigidTransform:
    """Minimize the squared reprojection error; never returns a pose with higher cost."""
    uv = np.asarray(uv, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    pose = initial
    cost = _cost(pose, uv, X, k)
    for _ in range(iterations):
        if cost == 0:
            break
        r = reprojection_residuals(pose, uv, X, k).reshape(-1)
        J = reprojection_jacobian(pose, X, k)
        delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        step = 1.0
        for _ in range(10):
            cand = _update(pose, step * delta)
            with np.errstate(divide="ignore", invalid="ignore"):
                c = _cost(cand, uv, X, k)
            if np.isfinite(c) and c < cost:
                break
            step *= 0.5
        else:
            break
        pose, cost = cand, c
    return pose


def residuals_3d(pose: RigidTransform, cam_points, world_points, valid=None) -> np.ndarray:
    """||Gamma(x) - T^-1 y||; +inf where the pixel has no depth."""
    r = np.linalg.norm(np.asarray(cam_points) - pose.inverse().apply(world_points), axis=1)
    if valid is not None:
        r = np.where(valid, r, np.inf)
    return r


def ransac_pnp(uv, cam_points, world_points, k: CameraIntrinsics, cfg: RansacConfig = RansacConfig(),
               valid=None) -> tuple[RigidTransform, np.ndarray]:
    """Hypothesize-and-verify PnP with a 3D residual inlier test.

    uv: (N, 2) pixels; cam_points: (N, 3) depth lifts of those pixels;
    world_points: (N, 3) matched cloud points. Raises RegistrationFailure
    when no hypothesis gathers ``sample_size`` inliers.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    cam_points = np.asarray(cam_points, dtype=np.float64).reshape(-1, 3)
    world_points = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
    n = len(uv)
    if n < cfg.sample_size:
        raise RegistrationFailure(f"{n} matches < sample size {cfg.sample_size}")
    rng = np.random.default_rng(cfg.seed)
    best_count, best_pose = -1, None
    limit = cfg.max_iterations
    it = 0
    while it < limit:
        it += 1
        sample = rng.choice(n, cfg.sample_size, replace=False)
        try:
            pose = pnp_dlt(uv[sample], world_points[sample], k)
        except DegenerateConfigurationError:
            continue
        count = int(np.count_nonzero(residuals_3d(pose, cam_points, world_points, valid) < cfg.inlier_threshold))
        if count > best_count:
            best_count, best_pose = count, pose
            w = count / n
            if w >= 1:
                limit = it
            elif w > 0:
                denom = np.log(1 - w ** cfg.sample_size)
                if denom < 0:
                    limit = min(limit, int(np.ceil(np.log(1 - cfg.confidence) / denom)))
    if best_pose is None or best_count < cfg.sample_size:
        raise RegistrationFailure("no hypothesis reached the minimum consensus")
    inl = np.flatnonzero(residuals_3d(best_pose, cam_points, world_points, valid) < cfg.inlier_threshold)
    pose = best_pose
    try:
        pose = pnp_dlt(uv[inl], world_points[inl], k)
    except DegenerateConfigurationError:
        pass
    if _cost(pose, uv[inl], world_points[inl], k) > _cost(best_pose, uv[inl], world_points[inl], k):
        pose = best_pose
    pose = refine_gauss_newton(pose, uv[inl], world_points[inl], k, cfg.refine_iterations)
    inl = np.flatnonzero(residuals_3d(pose, cam_points, world_points, valid) < cfg.inlier_threshold)
    if len(inl) < cfg.sample_size:
        raise RegistrationFailure("refined pose lost its consensus")
    return pose, inl
