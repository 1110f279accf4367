"""Pinhole camera model and rigid transforms.

Pixels use (u, v) = (column, row) with the origin at the top-left corner.
Depth is the camera-frame z coordinate, not the ray length.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class RigidTransform:
    """x' = R x + t. Poses in this package map camera coordinates to world."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise InvalidInputError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidInputError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, x) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: apply(compose(a, b), x) == apply(a, apply(b, x))."""
        R = self.rotation @ other.rotation
        return RigidTransform(_reorthonormalize(R), self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


def apply(t: RigidTransform, x) -> np.ndarray:
    return t.apply(x)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    # keeps long composition chains on SO(3)
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Closest rotation matrix to M in Frobenius norm."""
    return _reorthonormalize(np.asarray(M, dtype=np.float64))


def rodrigues(w) -> np.ndarray:
    """Rotation matrix for the axis-angle vector w."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K
    K = K / theta
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (radians) of rotation R."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> RigidTransform:
    """Camera-to-world pose looking from eye to target (camera +z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return RigidTransform(nearest_rotation(R), eye)


def unproject(p, depth, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) p = (u, v) with depth to camera-frame point(s)."""
    p = np.asarray(p, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise InvalidInputError("depth must be positive")
    u, v = p[..., 0], p[..., 1]
    return np.stack([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth * np.ones_like(u)], axis=-1)


def project(x, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame point(s). Returns (pixels, behind) where behind flags z <= 0."""
    x = np.asarray(x, dtype=np.float64)
    z = x[..., 2]
    behind = z <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(behind, 1.0, z)
        uv = np.stack([k.fx * x[..., 0] / safe + k.cx, k.fy * x[..., 1] / safe + k.cy], axis=-1)
    return uv, behind


def in_image(uv, k: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv)
    return (uv[..., 0] >= 0) & (uv[..., 0] < k.width) & (uv[..., 1] >= 0) & (uv[..., 1] < k.height)


def in_frustum(x, k: CameraIntrinsics, t: RigidTransform) -> np.ndarray:
    """True where t.apply(x) lies in front of the camera and projects inside the image.

    ``t`` maps the frame of ``x`` into the camera frame.
    """
    xc = t.apply(x)
    uv, behind = project(xc, k)
    return ~behind & in_image(uv, k)


def pixel_grid(k: CameraIntrinsics) -> np.ndarray:
    """(H*W, 2) array of (u, v) in row-major pixel-index order."""
    v, u = np.mgrid[0:k.height, 0:k.width]
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)


def save_camera_json(path, k: CameraIntrinsics, pose: RigidTransform | None = None, **extra) -> None:
    doc = k.to_dict()
    if pose is not None:
        doc["T"] = pose.matrix.ravel().tolist()
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_camera_json(path) -> tuple[CameraIntrinsics, RigidTransform | None, dict]:
    doc = json.loads(Path(path).read_text())
    k = CameraIntrinsics.from_dict(doc)
    pose = RigidTransform.from_matrix(doc["T"]) if "T" in doc else None
    return k, pose, doc
