"""Mutual nearest-neighbour matching and pixel/point matching metrics.

All thresholds use strict inequalities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .data import DepthImage, KdTree
from .errors import InvalidInputError
from .geometry import CameraIntrinsics, RigidTransform, pixel_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricThresholds:
    tau1: float = 0.5
    tau2: float = 0.045
    tau3: float = 0.02
    tau4: float = 0.05

    def __post_init__(self):
        if min(self.tau1, self.tau2, self.tau3, self.tau4) <= 0 or self.tau1 > 1:
            raise InvalidInputError("thresholds must be positive with tau1 in (0, 1]")


@dataclass
class MatchSet:
    rows: np.ndarray            # index into the first descriptor set (pixels)
    cols: np.ndarray            # index into the second descriptor set (points)
    similarity: np.ndarray
    provenance: str = "mutual-nn"

    def __len__(self):
        return len(self.rows)


@dataclass
class MetricResult:
    value: float
    flags: list = field(default_factory=list)


def _nearest(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Index into b of the Euclidean nearest neighbour of each row of a (lowest index on ties)."""
    out = np.empty(len(a), dtype=np.int64)
    for s in range(0, len(a), chunk):
        out[s:s + chunk] = np.argmin(cdist(a[s:s + chunk], b, "sqeuclidean"), axis=1)
    return out


def mutual_nn_match(desc_x, desc_y) -> MatchSet:
    X = np.asarray(getattr(desc_x, "data", desc_x), dtype=np.float64)
    Y = np.asarray(getattr(desc_y, "data", desc_y), dtype=np.float64)
    if len(X) == 0 or len(Y) == 0:
        z = np.zeros(0, dtype=np.int64)
        return MatchSet(z, z.copy(), np.zeros(0))
    nn_xy = _nearest(X, Y)
    nn_yx = _nearest(Y, X)
    rows = np.flatnonzero(nn_yx[nn_xy] == np.arange(len(X)))
    cols = nn_xy[rows]
    return MatchSet(rows, cols, (X[rows] * Y[cols]).sum(1))


@dataclass
class PairGeometry:
    """What the metrics need about one image / cloud pair.

    cam_points[t] is the camera-frame lift of pixel t (row-major index);
    ``pose`` maps camera coordinates to the cloud frame.
    """

    cam_points: np.ndarray
    valid: np.ndarray
    points: np.ndarray
    pose: RigidTransform

    @classmethod
    def from_depth(cls, depth: DepthImage, k: CameraIntrinsics, points, pose: RigidTransform) -> "PairGeometry":
        uv = pixel_grid(k)
        d = depth.depths.ravel()
        cam = np.zeros((len(d), 3))
        v = depth.valid.ravel()
        cam[v, 0] = (uv[v, 0] - k.cx) * d[v] / k.fx
        cam[v, 1] = (uv[v, 1] - k.cy) * d[v] / k.fy
        cam[v, 2] = d[v]
        return cls(cam, v, np.asarray(points, dtype=np.float64), pose)

    def residuals(self, pix_idx, pt_idx, pose: RigidTransform | None = None) -> tuple[np.ndarray, np.ndarray]:
        """||Gamma(x_i) - T^-1 y_j|| per pair and a validity mask (depth present)."""
        pose = self.pose if pose is None else pose
        pix_idx = np.asarray(pix_idx, dtype=np.int64)
        y = pose.inverse().apply(self.points[np.asarray(pt_idx, dtype=np.int64)])
        r = np.linalg.norm(self.cam_points[pix_idx] - y, axis=-1)
        return r, self.valid[pix_idx]


def inlier_ratio(matches, geom: PairGeometry, tau2: float = 0.045) -> MetricResult:
    rows, cols = _pairs(matches)
    if len(rows) == 0:
        return MetricResult(0.0, ["empty match set"])
    r, ok = geom.residuals(rows, cols)
    flags = []
    if not ok.all():
        flags.append(f"{int((~ok).sum())} matches without depth counted as outliers")
        log.warning(flags[-1])
    return MetricResult(float(np.count_nonzero(ok & (r < tau2)) / len(rows)), flags)


def feature_matching_recall(irs, tau1: float = 0.5) -> float:
    irs = np.asarray([getattr(v, "value", v) for v in irs], dtype=np.float64)
    if irs.size == 0:
        raise InvalidInputError("no pairs to aggregate")
    return float(np.count_nonzero(irs > tau1) / irs.size)


def keypoint_repeatability(kp_pix, kp_pts, geom: PairGeometry, tau3: float = 0.02) -> MetricResult:
    """Fraction of image keypoints (with depth) whose lift lies within tau3 of the
    nearest detected cloud keypoint, compared in the camera frame."""
    kp_pix = np.asarray(kp_pix, dtype=np.int64)
    kp_pts = np.asarray(kp_pts, dtype=np.int64)
    kp_pix = kp_pix[geom.valid[kp_pix]] if len(kp_pix) else kp_pix
    if len(kp_pix) == 0 or len(kp_pts) == 0:
        return MetricResult(0.0, ["empty keypoint set"])
    tree = KdTree(geom.pose.inverse().apply(geom.points[kp_pts]))
    d, _ = tree.query_many(geom.cam_points[kp_pix], 1)
    return MetricResult(float(np.count_nonzero(d[:, 0] < tau3) / len(kp_pix)))


def recall(matches, n_ground_truth: int, geom: PairGeometry, tau2: float = 0.045) -> float:
    if n_ground_truth <= 0:
        raise InvalidInputError("ground-truth set is empty")
    rows, cols = _pairs(matches)
    if len(rows) == 0:
        return 0.0
    r, ok = geom.residuals(rows, cols)
    return float(np.count_nonzero(ok & (r < tau2)) / n_ground_truth)


def registration_rmse(pose_hat: RigidTransform, gt_pix, gt_pts, geom: PairGeometry) -> float:
    r, ok = geom.residuals(gt_pix, gt_pts, pose=pose_hat)
    if not ok.all():
        log.info("dropping %d ground-truth pairs without depth from the RMSE", int((~ok).sum()))
    if not ok.any():
        return float("inf")
    return float(np.sqrt(np.mean(r[ok] ** 2)))


def registration_recall(entries, tau4: float = 0.05) -> float:
    """``entries``: iterable of (pose_hat or None, gt_pix, gt_pts, geom). None counts as failure."""
    entries = list(entries)
    if not entries:
        raise InvalidInputError("no pairs to aggregate")
    hits = 0
    for pose_hat, gp, gq, geom in entries:
        if pose_hat is not None and registration_rmse(pose_hat, gp, gq, geom) < tau4:
            hits += 1
    return hits / len(entries)


def _pairs(matches):
    if isinstance(matches, MatchSet):
        return matches.rows, matches.cols
    m = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    return m[:, 0], m[:, 1]
