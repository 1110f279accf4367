"""Keypoint scoring and selection on dense detection maps.

Soft scores per location t and channel c:

    alpha = softplus(D[t, c] - mean of D[., c] over the neighbourhood of t)
    beta  = softplus(D[t, c] - mean of D[t, .] over channels)
    gamma = max_c alpha * beta,   S = gamma / sum(gamma)

Image neighbourhoods are (2r+1)^2 windows clipped to the image; cloud
neighbourhoods are radius balls. Both include the location itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import radius_neighbors
from .errors import InvalidInputError


@dataclass(frozen=True)
class DetectionConfig:
    window_radius: int = 2
    cloud_radius: float = 0.03
    cloud_max_neighbors: int = 64
    edge_ratio: float = 10.0
    top_k: int = 1000
    use_normalized: bool = False

    def __post_init__(self):
        if self.window_radius < 1 or self.cloud_radius <= 0 or self.edge_ratio <= 1:
            raise InvalidInputError("invalid detection configuration")


@dataclass
class CloudNeighborhood:
    idx: np.ndarray
    mask: np.ndarray

    @classmethod
    def build(cls, points, cfg: DetectionConfig) -> "CloudNeighborhood":
        return cls(*radius_neighbors(points, cfg.cloud_radius, cfg.cloud_max_neighbors))


def init_detector(descriptor_dim: int) -> dict:
    """Per-modality channel-wise affine map applied to raw activations before scoring."""
    C = descriptor_dim
    return {
        "det.img.scale": Tensor(np.ones(C), requires_grad=True),
        "det.img.shift": Tensor(np.zeros(C), requires_grad=True),
        "det.pts.scale": Tensor(np.ones(C), requires_grad=True),
        "det.pts.shift": Tensor(np.zeros(C), requires_grad=True),
    }


def detection_maps(feat, params: dict | None, modality: str, cfg: DetectionConfig = DetectionConfig()) -> Tensor:
    """(T, C) detection maps D from extractor output."""
    D = feat.desc if cfg.use_normalized else feat.raw
    if params is not None:
        D = ad.add(ad.mul(D, params[f"det.{modality}.scale"]), params[f"det.{modality}.shift"])
    return D


def _neighborhood_mean(D: Tensor, grid, nbr, cfg: DetectionConfig) -> Tensor:
    if grid is not None:
        H, W = grid
        m = ad.local_mean2d(ad.reshape(D, (H, W, D.shape[1])), cfg.window_radius)
        return ad.reshape(m, D.shape)
    if nbr is None:
        raise InvalidInputError("cloud layout requires a neighbourhood")
    mask = nbr.mask.astype(np.float64)
    s = ad.sum(ad.mul(ad.gather_rows(D, nbr.idx), mask[..., None]), axis=1)
    return ad.div(s, mask.sum(axis=1, keepdims=True))


def soft_scores(D, grid=None, nbr: CloudNeighborhood | None = None,
                cfg: DetectionConfig = DetectionConfig()) -> Tensor:
    """Normalized soft detection scores S (length T) for detection maps D (T, C)."""
    D = ad.as_tensor(D)
    if D.shape[0] < 1:
        raise InvalidInputError("empty detection map")
    alpha = ad.softplus(ad.sub(D, _neighborhood_mean(D, grid, nbr, cfg)))
    beta = ad.softplus(ad.sub(D, ad.mean(D, axis=1, keepdims=True)))
    gamma = ad.max(ad.mul(alpha, beta), axis=1)
    total = float(gamma.data.sum())
    if not total > 0:
        return Tensor(np.full(D.shape[0], 1.0 / D.shape[0]))
    return ad.div(gamma, ad.sum(gamma))


def hard_detect(D, grid=None, nbr: CloudNeighborhood | None = None,
                cfg: DetectionConfig = DetectionConfig()) -> np.ndarray:
    """Boolean mask: t is detected iff D[t, c] with c = argmax_k D[t, k] strictly
    exceeds D[t', c] for every other t' in the neighbourhood."""
    D = np.asarray(getattr(D, "data", D))
    T = D.shape[0]
    c = np.argmax(D, axis=1)
    own = D[np.arange(T), c]
    if grid is not None:
        H, W = grid
        G = D.reshape(H, W, -1)
        cg = c.reshape(H, W)
        ok = np.ones((H, W), dtype=bool)
        r = cfg.window_radius
        ys, xs = np.mgrid[0:H, 0:W]
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if dy == 0 and dx == 0:
                    continue
                ny, nx = ys + dy, xs + dx
                inb = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
                nv = G[np.clip(ny, 0, H - 1), np.clip(nx, 0, W - 1), cg]
                ok &= ~inb | (own.reshape(H, W) > nv)
        return ok.ravel()
    if nbr is None:
        raise InvalidInputError("cloud layout requires a neighbourhood")
    nv = D[nbr.idx, c[:, None]]
    others = nbr.mask & (nbr.idx != np.arange(T)[:, None])
    return np.all(~others | (own[:, None] > nv), axis=1)


def edge_eliminate(scores_grid, mask, ratio: float = 10.0) -> np.ndarray:
    """Drop masked locations whose finite-difference Hessian of the score surface
    has det <= 0 or tr^2 / det >= (ratio + 1)^2 / ratio."""
    s = np.asarray(getattr(scores_grid, "data", scores_grid), dtype=np.float64)
    H, W = s.shape
    p = np.pad(s, 1, mode="edge")
    c = p[1:-1, 1:-1]
    dxx = p[1:-1, 2:] - 2 * c + p[1:-1, :-2]
    dyy = p[2:, 1:-1] - 2 * c + p[:-2, 1:-1]
    dxy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / 4.0
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    thresh = (ratio + 1) ** 2 / ratio
    with np.errstate(divide="ignore", invalid="ignore"):
        good = (det > 0) & (tr * tr / det < thresh)
    return np.asarray(mask, dtype=bool).reshape(H, W) & good


def top_k(S, mask, k: int) -> np.ndarray:
    """Masked indices ranked by score descending, ties to the lower index."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    S = np.asarray(getattr(S, "data", S)).reshape(-1)
    idx = np.flatnonzero(np.asarray(mask).reshape(-1))
    order = np.lexsort((idx, -S[idx]))
    return idx[order[:k]]


def detect_keypoints(feat, D: Tensor, S: Tensor, cfg: DetectionConfig, nbr=None) -> np.ndarray:
    """Test-time selection: hard NMS (+ edge elimination on images), then top-K by S."""
    mask = hard_detect(D, feat.grid, nbr, cfg)
    if feat.grid is not None:
        mask = edge_eliminate(S.data.reshape(feat.grid), mask.reshape(feat.grid), cfg.edge_ratio).ravel()
    return top_k(S, mask, cfg.top_k)
