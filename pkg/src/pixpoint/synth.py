"""Synthetic RGB-D scenes with exactly known geometry.

A scene is a dense colored cloud sampled from a textured back wall, boxes
and spheres. Frames are rendered by splatting every point to its nearest
pixel with a z-buffer, so the depth at a covered pixel equals the winning
point's camera-frame z. Fragments are then built from the rendered frames
with the regular pipeline (fusion, grid subsampling, labeling).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .data import (DepthImage, Fragment, PipelineConfig, PointCloud, dump_json,
                   fuse_frames, grid_subsample, label_correspondences, read_depth_bin, read_image_png,
                   write_depth_bin, write_image_png)
from .errors import InvalidInputError
from .geometry import CameraIntrinsics, RigidTransform, load_camera_json, look_at, save_camera_json

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    n_scenes: int = 25
    points_per_scene: int = 120000
    image_size: int = 64
    frames_per_scene: int = 5
    focal: float = 60.0
    camera_step: float = 0.01
    train_fraction: float = 0.8
    seed: int = 0
    texture: str = "cells"

    def __post_init__(self):
        if self.image_size < 32 or self.points_per_scene < 500 or self.n_scenes < 1:
            raise InvalidInputError("synthetic scenes need image_size >= 32, points >= 500, n_scenes >= 1")
        if self.texture not in ("cells", "waves"):
            raise InvalidInputError(f"unknown texture {self.texture!r}")


class Texture:
    """Random smooth color field: a few plane waves per channel, values in [0, 1]."""

    def __init__(self, rng: np.random.Generator, n_waves: int = 4, periods=(0.04, 0.25)):
        self.dirs = rng.normal(size=(3, n_waves, 3))
        self.dirs /= np.linalg.norm(self.dirs, axis=-1, keepdims=True)
        per = rng.uniform(*periods, size=(3, n_waves))
        self.freq = 2 * np.pi / per
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amp = rng.uniform(0.5, 1.0, size=(3, n_waves))

    def __call__(self, p: np.ndarray) -> np.ndarray:
        arg = np.einsum("nd,cwd->ncw", p, self.dirs) * self.freq + self.phase
        v = (self.amp * np.sin(arg)).sum(-1) / self.amp.sum(-1)
        return 0.5 + 0.5 * v


class CellTexture:
    """Piecewise-constant colors: 3D Voronoi cells of roughly ``cell`` meters, each a uniform random RGB."""

    def __init__(self, rng: np.random.Generator, cell: float = 0.06, lo=(-0.6, -0.6, 0.2), hi=(0.6, 0.6, 1.0)):
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        n = int(np.ceil(np.prod(hi - lo) / cell ** 3))
        self.seeds = rng.uniform(lo, hi, size=(n, 3))
        self.colors = rng.uniform(0.0, 1.0, size=(n, 3))
        self._tree = cKDTree(self.seeds)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        _, i = self._tree.query(p)
        return self.colors[i]


def _sample_rect(rng, n, center, u, v, half_u, half_v):
    a = rng.uniform(-half_u, half_u, n)
    b = rng.uniform(-half_v, half_v, n)
    return center + a[:, None] * u + b[:, None] * v


def _sample_box(rng, n, center, half, R):
    # area-weighted faces of an oriented box
    faces = []
    for ax in range(3):
        o1, o2 = [a for a in range(3) if a != ax]
        area = half[o1] * half[o2]
        for sgn in (-1, 1):
            faces.append((ax, sgn, o1, o2, area))
    w = np.array([f[4] for f in faces])
    counts = rng.multinomial(n, w / w.sum())
    pts = []
    for (ax, sgn, o1, o2, _), c in zip(faces, counts):
        q = np.zeros((c, 3))
        q[:, ax] = sgn * half[ax]
        q[:, o1] = rng.uniform(-half[o1], half[o1], c)
        q[:, o2] = rng.uniform(-half[o2], half[o2], c)
        pts.append(q)
    return np.concatenate(pts) @ R.T + center


def _sample_sphere(rng, n, center, radius):
    d = rng.normal(size=(n, 3))
    return center + radius * d / np.linalg.norm(d, axis=1, keepdims=True)


def make_scene(rng: np.random.Generator, n_points: int, texture: str = "cells") -> PointCloud:
    """Dense colored cloud: tilted back wall plus 2-4 boxes / spheres in front of it."""
    from .geometry import random_rotation, rodrigues

    tilt = rodrigues(rng.uniform(-0.25, 0.25, 3) * np.array([1, 1, 0]))
    wall_c = np.array([0.0, 0.0, rng.uniform(0.75, 0.85)])
    n_obj = int(rng.integers(2, 5))
    n_wall = n_points // 2
    per_obj = (n_points - n_wall) // n_obj
    parts = [_sample_rect(rng, n_wall, wall_c, tilt[:, 0], tilt[:, 1], 0.5, 0.5)]
    for i in range(n_obj):
        c = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.45, 0.65)])
        if rng.random() < 0.5:
            half = rng.uniform(0.04, 0.1, 3)
            parts.append(_sample_box(rng, per_obj, c, half, random_rotation(rng)))
        else:
            parts.append(_sample_sphere(rng, per_obj, c, rng.uniform(0.04, 0.09)))
    pts = np.concatenate(parts)
    tex = CellTexture(rng) if texture == "cells" else Texture(rng)
    return PointCloud(pts, tex(pts))


def render(cloud: PointCloud, pose: RigidTransform, k: CameraIntrinsics) -> tuple[DepthImage, np.ndarray]:
    """Point-splat render with z-buffering. Returns (depth, color); uncovered pixels are invalid."""
    xc = pose.inverse().apply(cloud.points)
    front = xc[:, 2] > 1e-6
    xc = xc[front]
    cols = cloud.colors[front] if cloud.colors is not None else np.ones((len(xc), 3))
    u = np.floor(k.fx * xc[:, 0] / xc[:, 2] + k.cx + 0.5).astype(np.int64)
    v = np.floor(k.fy * xc[:, 1] / xc[:, 2] + k.cy + 0.5).astype(np.int64)
    inb = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    pix = v[inb] * k.width + u[inb]
    z = xc[inb, 2]
    cols = cols[inb]
    order = np.lexsort((z, pix))
    pix, z, cols = pix[order], z[order], cols[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    depth = np.zeros(k.width * k.height)
    color = np.zeros((k.width * k.height, 3))
    depth[pix[first]] = z[first]
    color[pix[first]] = cols[first]
    depth = depth.reshape(k.height, k.width)
    return DepthImage(depth, depth > 0), color.reshape(k.height, k.width, 3)


def intrinsics_for(cfg: SynthConfig) -> CameraIntrinsics:
    c = (cfg.image_size - 1) / 2.0
    return CameraIntrinsics(cfg.focal, cfg.focal, c, c, cfg.image_size, cfg.image_size)


def trajectory(rng: np.random.Generator, n: int, step: float) -> list:
    eye0 = np.array([rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08), rng.uniform(-0.05, 0.05)])
    target0 = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.7])
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return [look_at(eye0 + f * step * d, target0 + f * 0.5 * step * d) for f in range(n)]


def quantize_frame(depth: DepthImage, color: np.ndarray) -> tuple[DepthImage, np.ndarray]:
    """Round to the on-disk precision (float32 depth, 8-bit color)."""
    d = depth.depths.astype(np.float32).astype(np.float64)
    c = np.clip(np.round(color * 255), 0, 255) / 255.0
    return DepthImage(d, d > 0), c


def quantize_cloud(cloud: PointCloud) -> PointCloud:
    cols = None if cloud.colors is None else np.clip(np.round(cloud.colors * 255), 0, 255) / 255.0
    return PointCloud(cloud.points.astype(np.float32).astype(np.float64), cols)


def build_fragment(frames, image_index: int, cfg: PipelineConfig) -> Fragment:
    """Fuse frames, subsample, and label the frame at ``image_index`` against the fragment."""
    depth, color, pose, k = frames[image_index]
    cloud = quantize_cloud(grid_subsample(fuse_frames(frames), cfg.voxel_size))
    corr = label_correspondences(depth, k, pose, cloud, cfg)
    return Fragment(cloud, color, depth, k, pose, corr,
                    {"eta": cfg.eta, "voxel_size": cfg.voxel_size, "frame": "world",
                     "image_frame": image_index, "usable": bool(corr.usable)})


def write_raw_scene(directory, frames) -> None:
    d = Path(directory)
    for f, (depth, color, pose, k) in enumerate(frames):
        fd = d / f"frame_{f:02d}"
        fd.mkdir(parents=True, exist_ok=True)
        write_image_png(fd / "color.png", color)
        write_depth_bin(fd / "depth.bin", depth.depths)
        save_camera_json(fd / "meta.json", k, pose)


def read_raw_scene(directory) -> list:
    frames = []
    for fd in sorted(Path(directory).glob("frame_*")):
        k, pose, _ = load_camera_json(fd / "meta.json")
        frames.append((read_depth_bin(fd / "depth.bin", k.width, k.height),
                       read_image_png(fd / "color.png"), pose, k))
    if not frames:
        raise InvalidInputError(f"{directory}: no frames")
    return frames


def generate(out, cfg: SynthConfig, pipeline: PipelineConfig = PipelineConfig()) -> dict:
    """Write raw frames and labeled pairs under ``out``; returns the dataset index."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    k = intrinsics_for(cfg)
    for s in range(cfg.n_scenes):
        rng = np.random.default_rng([cfg.seed, s])
        scene = make_scene(rng, cfg.points_per_scene, cfg.texture)
        frames = []
        for pose in trajectory(rng, cfg.frames_per_scene, cfg.camera_step):
            depth, color = quantize_frame(*render(scene, pose, k))
            frames.append((depth, color, pose, k))
        write_raw_scene(out / "raw" / f"scene_{s:03d}", frames)
    return preprocess(out / "raw", out, pipeline, cfg.train_fraction)


def preprocess(raw_dir, out, cfg: PipelineConfig = PipelineConfig(), train_fraction: float = 0.8) -> dict:
    """Build one labeled pair per raw scene (middle frame against the fused fragment)."""
    raw_dir, out = Path(raw_dir), Path(out)
    scenes = sorted(p for p in raw_dir.iterdir() if p.is_dir())
    names, skipped = [], []
    for sd in scenes:
        frames = read_raw_scene(sd)[:cfg.frames_per_fragment]
        frag = build_fragment(frames, len(frames) // 2, cfg)
        name = f"{sd.name}_pair_00"
        if not frag.corr.usable:
            log.warning("%s: only %d correspondences, skipped", name, len(frag.corr))
            skipped.append(name)
            continue
        frag.save(out / "pairs" / name)
        names.append(name)
    n_train = int(round(train_fraction * len(names)))
    index = {"train": names[:n_train], "test": names[n_train:], "skipped": skipped,
             "pipeline": {"voxel_size": cfg.voxel_size, "eta": cfg.eta,
                          "min_correspondences": cfg.min_correspondences,
                          "noise_sigma": cfg.noise_sigma, "frames_per_fragment": cfg.frames_per_fragment}}
    dump_json(out / "dataset.json", index)
    return index
