"""Dense 2D and 3D feature extractors at reduced width.

Both produce a raw activation map (used for detection) and unit-norm
descriptors for every pixel / point. No normalization layers are used.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PointCloud, radius_neighbors, standardize_image
from .errors import InvalidInputError

PAPER_DILATIONS = (1, 1, 2, 2, 4, 4, 4, 8, 16)


@dataclass(frozen=True)
class Extractor2DConfig:
    channels: tuple = (8, 8, 16, 16, 32, 32, 32, 32, 32)
    dilations: tuple = PAPER_DILATIONS
    descriptor_dim: int = 32
    leaky_slope: float = 0.1
    n_activated: int = 6

    def __post_init__(self):
        if len(self.channels) != 9 or tuple(self.dilations) != PAPER_DILATIONS:
            raise InvalidInputError("2D extractor needs 9 layers with dilations (1,1,2,2,4,4,4,8,16)")
        if min(self.channels) < 1:
            raise InvalidInputError("layer widths must be >= 1")
        if self.channels[-1] != self.descriptor_dim:
            raise InvalidInputError("last layer width must equal descriptor_dim")

    @property
    def receptive_radius(self) -> int:
        return int(np.sum(self.dilations))


@dataclass(frozen=True)
class Extractor3DConfig:
    radii: tuple = (0.04, 0.08)
    widths: tuple = (16, 32)
    descriptor_dim: int = 32
    max_neighbors: int = 24
    leaky_slope: float = 0.1

    def __post_init__(self):
        if len(self.radii) != len(self.widths) or len(self.radii) < 1:
            raise InvalidInputError("one width per radius")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])) or self.radii[0] <= 0:
            raise InvalidInputError("radii must be positive and strictly increasing")


@dataclass
class DenseFeatures:
    """raw: (T, C) pre-normalization activations; desc: (T, C) unit-norm rows.

    ``grid`` is (H, W) for images and None for clouds.
    """

    raw: Tensor
    desc: Tensor
    grid: tuple | None = None
    degenerate: bool = False
    warnings: list = field(default_factory=list)

    @property
    def layout(self) -> str:
        return "image" if self.grid is not None else "cloud"

    def __len__(self):
        return self.raw.shape[0]


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_2d(cfg: Extractor2DConfig, seed, in_channels: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    cin = in_channels
    for i, cout in enumerate(cfg.channels):
        params[f"img.conv{i}.w"] = Tensor(_glorot(rng, (3, 3, cin, cout), 9 * cin, 9 * cout), requires_grad=True)
        params[f"img.conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    return params


def init_3d(cfg: Extractor3DConfig, seed, in_features: int = 4) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    cin = in_features
    for s, w in enumerate(cfg.widths):
        params[f"pts.stage{s}.w"] = Tensor(_glorot(rng, (cin, w), cin, w), requires_grad=True)
        params[f"pts.stage{s}.b"] = Tensor(np.zeros(w), requires_grad=True)
        params[f"pts.stage{s}.off"] = Tensor(_glorot(rng, (3, w), 3, w), requires_grad=True)
        cin = 2 * w
    C = cfg.descriptor_dim
    params["pts.head.w"] = Tensor(_glorot(rng, (cin, C), cin, C), requires_grad=True)
    params["pts.head.b"] = Tensor(np.zeros(C), requires_grad=True)
    return params


def _finish(raw: Tensor, grid) -> DenseFeatures:
    norms = np.linalg.norm(raw.data, axis=1)
    feat = DenseFeatures(raw, ad.l2_normalize(raw, axis=1), grid)
    if np.any(norms < ad.L2_GUARD):
        feat.degenerate = True
        feat.warnings.append("descriptor norm below guard")
    return feat


def extract_2d(image, cfg: Extractor2DConfig, params: dict) -> DenseFeatures:
    """image: standardized (H, W, 3) array or Tensor."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    warnings = []
    if abs(float(x.data.mean())) > 0.1:
        warnings.append("input image does not look standardized")
    H, W = x.shape[:2]
    for i, d in enumerate(cfg.dilations):
        x = ad.dilated_conv2d(x, params[f"img.conv{i}.w"], params[f"img.conv{i}.b"], dilation=d)
        if i < cfg.n_activated:
            x = ad.leaky_relu(x, cfg.leaky_slope)
    raw = ad.reshape(x, (H * W, x.shape[2]))
    feat = _finish(raw, (H, W))
    feat.warnings = warnings + feat.warnings
    return feat


@dataclass
class PointNeighborhoods:
    """Precomputed per-stage radius neighbourhoods of a cloud."""

    idx: list
    mask: list
    offsets: list

    @classmethod
    def build(cls, points, cfg: Extractor3DConfig) -> "PointNeighborhoods":
        points = np.asarray(points, dtype=np.float64)
        idx, mask, offs = [], [], []
        for r in cfg.radii:
            i, m = radius_neighbors(points, r, cfg.max_neighbors)
            idx.append(i)
            mask.append(m)
            # offsets in units of the radius, zero on padding
            offs.append((points[i] - points[:, None, :]) / r * m[..., None])
        return cls(idx, mask, offs)


def point_features(cloud: PointCloud) -> np.ndarray:
    """Per-point input: RGB standardized like the image (zeros without color) plus a constant 1."""
    if cloud.colors is None:
        cols = np.zeros((len(cloud), 3))
    else:
        cols, _ = standardize_image(cloud.colors)
    return np.concatenate([cols, np.ones((len(cloud), 1))], axis=1)


def extract_3d(cloud: PointCloud, cfg: Extractor3DConfig, params: dict,
               neighborhoods: PointNeighborhoods | None = None, features=None) -> DenseFeatures:
    """Two stages of (pointwise linear -> neighbourhood mean+max -> leaky relu), then a linear head."""
    if len(cloud) == 0:
        raise InvalidInputError("empty point cloud")
    nb = neighborhoods or PointNeighborhoods.build(cloud.points, cfg)
    x = features if isinstance(features, Tensor) else Tensor(point_features(cloud) if features is None else features)
    for s in range(len(cfg.radii)):
        h = ad.pointwise_linear(x, params[f"pts.stage{s}.w"], params[f"pts.stage{s}.b"])
        msg = ad.add(ad.gather_rows(h, nb.idx[s]),
                     ad.pointwise_linear(Tensor(nb.offsets[s]), params[f"pts.stage{s}.off"]))
        m = nb.mask[s]
        cnt = m.sum(axis=1, keepdims=True).astype(np.float64)
        mean = ad.div(ad.sum(ad.mul(msg, m[..., None].astype(np.float64)), axis=1), cnt)
        mx = ad.max(msg, axis=1, mask=np.broadcast_to(m[..., None], msg.shape))
        x = ad.leaky_relu(ad.concat([mean, mx], axis=1), cfg.leaky_slope)
    raw = ad.pointwise_linear(x, params["pts.head.w"], params["pts.head.b"])
    return _finish(raw, None)
