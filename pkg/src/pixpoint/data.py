"""Point clouds, fragment construction and 2D-3D correspondence labeling."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError
from .geometry import CameraIntrinsics, RigidTransform, in_frustum, pixel_grid, unproject

log = logging.getLogger(__name__)


@dataclass
class DepthImage:
    depths: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.depths) & (self.depths > 0)
        self.valid = np.asarray(self.valid, dtype=bool)
        if np.any(~(self.depths[self.valid] > 0)):
            raise InvalidInputError("valid depth entries must be positive")

    @property
    def shape(self):
        return self.depths.shape


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise InvalidInputError("point positions must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise InvalidInputError("colors and points differ in length")

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], None if self.colors is None else self.colors[idx])


@dataclass
class CorrespondenceSet:
    """Pixel-index / point-index pairs. Pixel index is v * width + u."""

    pixel_idx: np.ndarray
    point_idx: np.ndarray
    distance: np.ndarray | None = None
    kind: str = "ground_truth"
    usable: bool = True

    def __post_init__(self):
        self.pixel_idx = np.asarray(self.pixel_idx, dtype=np.int64).reshape(-1)
        self.point_idx = np.asarray(self.point_idx, dtype=np.int64).reshape(-1)
        if len(self.pixel_idx) != len(self.point_idx):
            raise InvalidInputError("pixel and point index arrays differ in length")
        if self.distance is not None:
            self.distance = np.asarray(self.distance, dtype=np.float64).reshape(-1)
        if self.kind == "ground_truth" and len(np.unique(self.pixel_idx)) != len(self.pixel_idx):
            raise InvalidInputError("duplicate pixel index in a ground-truth set")

    def __len__(self):
        return len(self.pixel_idx)


@dataclass(frozen=True)
class PipelineConfig:
    voxel_size: float = 0.015
    eta: float = 0.015
    min_correspondences: int = 128
    noise_sigma: float = 0.005
    frames_per_fragment: int = 5

    def __post_init__(self):
        if min(self.voxel_size, self.eta, self.noise_sigma) <= 0 or self.frames_per_fragment < 1:
            raise InvalidInputError("pipeline parameters must be positive")
        if self.min_correspondences < 1:
            raise InvalidInputError("min_correspondences must be >= 1")


class KdTree:
    """Exact k-NN index over 3D points.

    Candidate search is delegated to scipy; the final ordering is recomputed
    here so that results are sorted by distance with ties going to the lower
    index.
    """

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def _exact(self, q, cand, k):
        d = np.sqrt(((self.points[cand] - q) ** 2).sum(-1))
        order = np.lexsort((cand, d))[:k]
        return d[order], cand[order]

    def query(self, q, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of a single query. Returns (distances, indices)."""
        n = len(self)
        if k < 1 or k > n:
            raise InvalidInputError(f"k={k} must lie in [1, {n}]")
        q = np.asarray(q, dtype=np.float64).reshape(3)
        kk = min(n, k + 1)
        while True:
            d, i = self._tree.query(q, kk)
            d, i = np.atleast_1d(d), np.atleast_1d(i)
            # widen the candidate set until the k-th distance is strictly inside it
            if kk == n or d[-1] > d[k - 1] * (1 + 1e-9) + 1e-15:
                break
            kk = min(n, 2 * kk)
        return self._exact(q, i, k)

    def query_many(self, Q, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Batched query; returns (M, k) distance and index arrays."""
        n = len(self)
        if k < 1 or k > n:
            raise InvalidInputError(f"k={k} must lie in [1, {n}]")
        Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
        D = np.empty((len(Q), k))
        I = np.empty((len(Q), k), dtype=np.int64)
        if len(Q) == 0:
            return D, I
        kk = min(n, k + 1)
        d, i = self._tree.query(Q, kk)
        d, i = d.reshape(len(Q), kk), i.reshape(len(Q), kk)
        for m in range(len(Q)):
            if kk < n and not d[m, -1] > d[m, k - 1] * (1 + 1e-9) + 1e-15:
                D[m], I[m] = self.query(Q[m], k)
            else:
                D[m], I[m] = self._exact(Q[m], i[m], k)
        return D, I

    def query_radius(self, q, r: float) -> tuple[np.ndarray, np.ndarray]:
        """All points within distance r (inclusive), ascending by (distance, index)."""
        q = np.asarray(q, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-9)), dtype=np.int64)
        d, i = self._exact(q, cand, len(cand))
        keep = d <= r
        return d[keep], i[keep]


def kd_query(tree: KdTree, q, k: int = 1):
    return tree.query(q, k)


def radius_neighbors(points, radius: float, max_neighbors: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded neighbour lists: (Z, K) index array and boolean mask.

    Each row holds the closest points within ``radius`` (itself first),
    truncated to ``max_neighbors``; padding repeats the row's own index.
    """
    points = np.asarray(points, dtype=np.float64)
    Z = len(points)
    K = min(max_neighbors, Z)
    d, i = cKDTree(points).query(points, K)
    d, i = d.reshape(Z, K), i.reshape(Z, K)
    # exact distances, then (distance, index) order within each row
    d = np.sqrt(((points[i] - points[:, None, :]) ** 2).sum(-1))
    order = np.lexsort((i, d), axis=-1)
    d = np.take_along_axis(d, order, -1)
    i = np.take_along_axis(i, order, -1)
    inside = d <= radius
    idx = np.repeat(np.arange(Z)[:, None], max_neighbors, axis=1)
    mask = np.zeros((Z, max_neighbors), dtype=bool)
    idx[:, :K] = np.where(inside, i, idx[:, :K])
    mask[:, :K] = inside
    return idx, mask


def fuse_frames(frames) -> PointCloud:
    """Fuse RGB-D frames into one world-frame cloud.

    ``frames`` is a sequence of (DepthImage, color HxWx3 in [0, 1] or None,
    camera-to-world RigidTransform, CameraIntrinsics).
    """
    if len(frames) == 0:
        raise InvalidInputError("at least one frame is required")
    pts, cols = [], []
    have_color = all(f[1] is not None for f in frames)
    for depth, color, pose, k in frames:
        sel = depth.valid.ravel()
        uv = pixel_grid(k)[sel]
        xc = unproject(uv, depth.depths.ravel()[sel], k)
        pts.append(pose.apply(xc))
        if have_color:
            cols.append(np.asarray(color, dtype=np.float64).reshape(-1, 3)[sel])
    return PointCloud(np.concatenate(pts), np.concatenate(cols) if have_color else None)


def grid_subsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of every occupied voxel by their barycenter (colors averaged)."""
    if voxel <= 0:
        raise InvalidInputError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), None if cloud.colors is None else np.zeros((0, 3)))
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)

    def mean(x):
        out = np.zeros((len(counts), 3))
        np.add.at(out, inv, x)
        return out / counts[:, None]

    return PointCloud(mean(cloud.points), None if cloud.colors is None else mean(cloud.colors))


def label_correspondences(depth: DepthImage, k: CameraIntrinsics, pose: RigidTransform,
                          cloud: PointCloud, cfg: PipelineConfig = PipelineConfig()) -> CorrespondenceSet:
    """Pair every valid pixel with its nearest in-frustum cloud point closer than eta.

    ``pose`` maps camera coordinates into the cloud's frame. The result is
    sorted by pixel index; ``usable`` is False below ``cfg.min_correspondences``.
    """
    empty = CorrespondenceSet(np.zeros(0), np.zeros(0), np.zeros(0), usable=False)
    visible = np.flatnonzero(in_frustum(cloud.points, k, pose.inverse()))
    if len(visible) == 0:
        return empty
    tree = KdTree(cloud.points[visible])
    pix = np.flatnonzero(depth.valid.ravel())
    if len(pix) == 0:
        return empty
    uv = np.stack([pix % k.width, pix // k.width], axis=1).astype(np.float64)
    xw = pose.apply(unproject(uv, depth.depths.ravel()[pix], k))
    d, i = tree.query_many(xw, 1)
    d, i = d[:, 0], i[:, 0]
    keep = d < cfg.eta
    out = CorrespondenceSet(pix[keep], visible[i[keep]], d[keep])
    out.usable = len(out) >= cfg.min_correspondences
    return out


def augment_noise(cloud: PointCloud, sigma: float, seed) -> PointCloud:
    if sigma < 0:
        raise InvalidInputError("sigma must be non-negative")
    if sigma == 0:
        return PointCloud(cloud.points.copy(), None if cloud.colors is None else cloud.colors.copy())
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + rng.normal(0.0, sigma, cloud.points.shape),
                      None if cloud.colors is None else cloud.colors.copy())


def standardize_image(image) -> tuple[np.ndarray, bool]:
    """Zero mean, unit standard deviation over all pixels and channels.

    Returns (image, degenerate); a constant image maps to zeros with degenerate=True.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("empty image")
    x = x - x.mean()
    s = x.std()
    if s == 0 or not np.isfinite(s):
        return np.zeros_like(x), True
    return x / s, False


# --- file formats -----------------------------------------------------------

def write_ply(path, cloud: PointCloud) -> None:
    """Binary little-endian PLY with float32 xyz and optional uint8 rgb."""
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header.append("end_header")
    rec = np.zeros(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype(np.float32)
    if cloud.colors is not None:
        rgb = np.clip(np.round(cloud.colors * 255), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise InvalidInputError("only binary little-endian PLY is supported")
    n = 0
    fields = []
    types = {"float": "<f4", "uchar": "u1", "double": "<f8"}
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            fields.append((parts[2], types[parts[1]]))
    rec = np.frombuffer(raw, dtype=fields, count=n, offset=end)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    cols = None
    if "red" in rec.dtype.names:
        cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64) / 255.0
    return PointCloud(pts, cols)


def write_depth_bin(path, depth: np.ndarray) -> None:
    np.asarray(depth, dtype="<f4").tofile(path)


def read_depth_bin(path, width: int, height: int) -> DepthImage:
    d = np.fromfile(path, dtype="<f4").astype(np.float64)
    if d.size != width * height:
        raise InvalidInputError(f"{path}: expected {width * height} depth values, got {d.size}")
    d = d.reshape(height, width)
    return DepthImage(d, d > 0)


def write_image_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_image_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_pairs_csv(path, corr: CorrespondenceSet) -> None:
    dist = corr.distance if corr.distance is not None else np.zeros(len(corr))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pixel_index", "point_index", "distance"])
        for a, b, d in zip(corr.pixel_idx, corr.point_idx, dist):
            w.writerow([int(a), int(b), f"{d:.9g}"])


def read_pairs_csv(path) -> CorrespondenceSet:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        return CorrespondenceSet(np.zeros(0), np.zeros(0), np.zeros(0))
    return CorrespondenceSet(rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64), rows[:, 2])


@dataclass
class Fragment:
    """One image / point-cloud training or test pair."""

    cloud: PointCloud
    image: np.ndarray
    depth: DepthImage
    intrinsics: CameraIntrinsics
    pose: RigidTransform
    corr: CorrespondenceSet
    meta: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        from .geometry import save_camera_json

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_ply(d / "cloud.ply", self.cloud)
        write_image_png(d / "image.png", self.image)
        write_depth_bin(d / "depth.bin", self.depth.depths * self.depth.valid)
        save_camera_json(d / "meta.json", self.intrinsics, self.pose, **self.meta)
        write_pairs_csv(d / "pairs.csv", self.corr)

    @classmethod
    def load(cls, directory) -> "Fragment":
        from .geometry import load_camera_json

        d = Path(directory)
        missing = [n for n in ("cloud.ply", "image.png", "depth.bin", "meta.json", "pairs.csv")
                   if not (d / n).exists()]
        if missing:
            raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
        k, pose, meta = load_camera_json(d / "meta.json")
        for key in ("fx", "fy", "cx", "cy", "width", "height", "T"):
            meta.pop(key, None)
        return cls(read_ply(d / "cloud.ply"), read_image_png(d / "image.png"),
                   read_depth_bin(d / "depth.bin", k.width, k.height), k, pose,
                   read_pairs_csv(d / "pairs.csv"), meta)


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
