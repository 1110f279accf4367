"""Descriptor and detector losses over a batch of sampled correspondences.

A batch holds B pixel descriptors X and B point descriptors Y where row i
of each side forms a true pair. ``sim = X @ Y.T`` so ``diag(sim)`` are the
positive similarities d_p and off-diagonal entries are mismatches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError

EXP_CLAMP = 50.0


@dataclass(frozen=True)
class CircleParams:
    m: float = 0.2
    zeta: float = 10.0

    def __post_init__(self):
        if not (0 < self.m < 1) or self.zeta <= 0:
            raise InvalidInputError("circle loss needs 0 < m < 1 and zeta > 0")

    @property
    def O_p(self): return 1 + self.m

    @property
    def O_n(self): return -self.m

    @property
    def delta_p(self): return 1 - self.m

    @property
    def delta_n(self): return self.m


@dataclass(frozen=True)
class MarginParams:
    M: float = 0.2
    M_p: float = 0.9
    M_n: float = 0.2

    def __post_init__(self):
        if self.M <= 0 or not self.M_p > self.M_n:
            raise InvalidInputError("need M > 0 and M_p > M_n")


@dataclass
class LossBatch:
    desc_x: Tensor          # (B, C) pixel descriptors
    desc_y: Tensor          # (B, C) point descriptors
    pix_xy: np.ndarray      # (B, 2) pixel coordinates
    pts_xyz: np.ndarray     # (B, 3) point coordinates
    score_x: Tensor | None = None
    score_y: Tensor | None = None
    sel: np.ndarray | None = None
    R_I: float = 12.0
    R_P: float = 0.015
    sim: Tensor = field(init=False)

    def __post_init__(self):
        self.sim = ad.matmul(self.desc_x, ad.transpose(self.desc_y))

    def __len__(self):
        return self.desc_x.shape[0]

    @property
    def d_p(self) -> np.ndarray:
        return np.diag(self.sim.data).copy()


class PairSkipped(Exception):
    """Raised when a pair has fewer correspondences than the batch size."""


def sample_correspondences(n_corr: int, B: int, seed) -> np.ndarray:
    if n_corr < B:
        raise PairSkipped(f"{n_corr} correspondences < batch size {B}")
    return np.random.default_rng(seed).permutation(n_corr)[:B]


def build_batch(feat_i, feat_p, corr, pixel_uv: np.ndarray, points: np.ndarray, B: int, seed,
                S_i: Tensor | None = None, S_p: Tensor | None = None,
                R_I: float = 12.0, R_P: float = 0.015) -> LossBatch:
    """Sample B correspondences uniformly without replacement and gather their descriptors.

    ``pixel_uv`` holds (u, v) for every pixel index; ``points`` the cloud positions.
    """
    sel = sample_correspondences(len(corr), B, seed)
    pi, pj = corr.pixel_idx[sel], corr.point_idx[sel]
    return LossBatch(
        ad.gather_rows(feat_i.desc, pi), ad.gather_rows(feat_p.desc, pj),
        np.asarray(pixel_uv, dtype=np.float64)[pi], np.asarray(points, dtype=np.float64)[pj],
        None if S_i is None else ad.gather_rows(S_i, pi),
        None if S_p is None else ad.gather_rows(S_p, pj),
        sel, R_I, R_P)


def _pairwise(a):
    return np.sqrt(((a[:, None, :] - a[None, :, :]) ** 2).sum(-1))


def negative_masks(batch: LossBatch, safe_radius: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Admissible negatives per anchor.

    ``mask_x[i, j]``: Y_j is a negative for pixel anchor X_i (indexes sim[i, j]);
    requires ||P_j - P_i|| > R_P.  ``mask_y[i, j]``: X_j is a negative for point
    anchor Y_i (indexes sim[j, i]); requires ||I_j - I_i|| > R_I.
    """
    B = len(batch)
    off = ~np.eye(B, dtype=bool)
    if not safe_radius:
        return off.copy(), off.copy()
    return off & (_pairwise(batch.pts_xyz) > batch.R_P), off & (_pairwise(batch.pix_xy) > batch.R_I)


@dataclass
class LossInfo:
    value: float = 0.0
    excluded_anchors: int = 0
    empty_negatives: bool = False


def circle_descriptor_loss(batch: LossBatch, params: CircleParams = CircleParams(),
                           form: str = "as_written", safe_radius: bool = True,
                           info: LossInfo | None = None) -> Tensor:
    """Circle-guided descriptor loss.

    as_written: softplus( sum_i exp(z (Dp - dp_i) [Op - dp_i]_+)
                        + sum_(anchor, neg) exp(z (dn - Dn) [dn - On]_+) )
    canonical:  softplus( logsumexp_n(z [dn - On]_+ (dn - Dn))
                        + logsumexp_i(-z [Op - dp_i]_+ (dp_i - Dp)) )

    Every admissible mismatch contributes once per anchor direction.
    """
    sim = batch.sim
    B = len(batch)
    mx, my = negative_masks(batch, safe_radius)
    # count[i, j]: how many anchor directions admit sim[i, j] as a negative
    count = mx.astype(np.float64) + my.T.astype(np.float64)
    d_p = ad.sum(ad.mul(sim, np.eye(B)), axis=1)
    if info is not None:
        info.empty_negatives = not count.any()
        info.excluded_anchors = int((~mx.any(1)).sum() + (~my.any(1)).sum())
    out = circle_terms(d_p, sim, count, params, form)
    if info is not None:
        info.value = out.item()
    return out


def circle_terms(d_p: Tensor, d_n: Tensor, count: np.ndarray, params: CircleParams = CircleParams(),
                 form: str = "as_written") -> Tensor:
    """Circle loss from positive similarities ``d_p`` and candidate negatives ``d_n``,
    each negative entry weighted by ``count`` (0 drops it)."""
    d_p, d_n = ad.as_tensor(d_p), ad.as_tensor(d_n)
    count = np.broadcast_to(np.asarray(count, dtype=np.float64), d_n.shape)
    z = params.zeta
    w_p = ad.relu(ad.sub(params.O_p, d_p))
    w_n = ad.relu(ad.sub(d_n, params.O_n))
    if form == "as_written":
        pos = ad.clamp_max(ad.mul(ad.mul(ad.sub(params.delta_p, d_p), w_p), z), EXP_CLAMP)
        neg = ad.clamp_max(ad.mul(ad.mul(ad.sub(d_n, params.delta_n), w_n), z), EXP_CLAMP)
        return ad.softplus(ad.add(ad.sum(ad.exp(pos)), ad.sum(ad.mul(ad.exp(neg), count))))
    if form == "canonical":
        lp = ad.mul(ad.mul(w_p, ad.sub(d_p, params.delta_p)), -z)
        ln = ad.mul(ad.mul(w_n, ad.sub(d_n, params.delta_n)), z)
        return ad.softplus(ad.add(_logsumexp(ln, count), _logsumexp(lp, np.ones(d_p.shape))))
    raise InvalidInputError(f"unknown circle form {form!r}")


def _logsumexp(x: Tensor, weight: np.ndarray) -> Tensor:
    """log(sum(weight * exp(x))); empty weight gives a constant large-negative value."""
    if not np.any(weight > 0):
        return Tensor(np.array(-EXP_CLAMP))
    shift = float(np.max(x.data[weight > 0]))
    s = ad.sum(ad.mul(ad.exp(ad.sub(x, shift)), weight))
    return ad.add(ad.log(s), shift)


def hardest_negatives(batch: LossBatch, safe_radius: bool = True) -> tuple[Tensor, np.ndarray]:
    """Per-correspondence d_n = max over both anchor directions of admissible similarities.

    Returns (d_n, valid) where ``valid`` marks correspondences with at least one negative.
    """
    mx, my = negative_masks(batch, safe_radius)
    row = ad.max(batch.sim, axis=1, mask=mx)          # X_i against Y_j
    col = ad.max(ad.transpose(batch.sim), axis=1, mask=my)  # Y_i against X_j
    has_x, has_y = mx.any(1), my.any(1)
    both = ad.concat([ad.reshape(row, (-1, 1)), ad.reshape(col, (-1, 1))], axis=1)
    avail = np.stack([has_x, has_y], axis=1)
    return ad.max(both, axis=1, mask=avail), has_x | has_y


def _masked_mean(x: Tensor, valid: np.ndarray) -> Tensor:
    n = int(valid.sum())
    if n == 0:
        return ad.mul(ad.sum(x), 0.0)
    return ad.div(ad.sum(ad.mul(x, valid.astype(np.float64))), float(n))


def hard_triplet_loss(batch: LossBatch, params: MarginParams = MarginParams(), literal: bool = False,
                      safe_radius: bool = True, info: LossInfo | None = None) -> Tensor:
    """mean [M + d_n - d_p]_+ (literal=True: mean [d_p - d_n - M]_+)."""
    d_n, valid = hardest_negatives(batch, safe_radius)
    d_p = ad.sum(ad.mul(batch.sim, np.eye(len(batch))), axis=1)
    if literal:
        h = ad.relu(ad.sub(ad.sub(d_p, d_n), params.M))
    else:
        h = ad.relu(ad.add(ad.sub(d_n, d_p), params.M))
    if info is not None:
        info.excluded_anchors = int((~valid).sum())
    return _masked_mean(h, valid)


def hard_contrastive_loss(batch: LossBatch, params: MarginParams = MarginParams(),
                          safe_radius: bool = True, info: LossInfo | None = None) -> Tensor:
    """mean [M_p - d_p]_+ + [d_n - M_n]_+."""
    d_n, valid = hardest_negatives(batch, safe_radius)
    d_p = ad.sum(ad.mul(batch.sim, np.eye(len(batch))), axis=1)
    h = ad.add(ad.relu(ad.sub(params.M_p, d_p)), ad.relu(ad.sub(d_n, params.M_n)))
    if info is not None:
        info.excluded_anchors = int((~valid).sum())
    return _masked_mean(h, valid)


def detector_weights(score_x: Tensor, score_y: Tensor) -> Tensor:
    prod = ad.mul(score_x, score_y)
    return ad.div(prod, ad.sum(prod))


def detector_loss(batch: LossBatch, score_x: Tensor | None = None, score_y: Tensor | None = None) -> Tensor:
    """Batch-hard detector loss: sum_i w_i (max(X_i . Y*_i, X*_i . Y_i) - d_p_i),
    w = S_X S_Y / sum(S_X S_Y), hardest negatives over all batch mismatches."""
    sx = batch.score_x if score_x is None else score_x
    sy = batch.score_y if score_y is None else score_y
    if sx is None or sy is None:
        raise InvalidInputError("detector loss needs scores")
    off = ~np.eye(len(batch), dtype=bool)
    d_p = ad.sum(ad.mul(batch.sim, np.eye(len(batch))), axis=1)
    row = ad.max(batch.sim, axis=1, mask=off)
    col = ad.max(ad.transpose(batch.sim), axis=1, mask=off)
    d_n = ad.max(ad.concat([ad.reshape(row, (-1, 1)), ad.reshape(col, (-1, 1))], axis=1), axis=1)
    return ad.sum(ad.mul(detector_weights(sx, sy), ad.sub(d_n, d_p)))


def combined_loss(desc_loss: Tensor, det_loss: Tensor | None, lam: float = 1.0) -> Tensor:
    if det_loss is None:
        return desc_loss
    return ad.add(desc_loss, ad.mul(det_loss, lam))


def trace(batch_or_sim, safe_radius: bool = True) -> tuple[float, float]:
    """(mean d_p, mean d_n*).

    For a LossBatch, d_n* is each correspondence's hardest admissible negative
    (both anchor directions, safe radii applied) and correspondences without
    any are left out of the mean.  A bare similarity matrix has no coordinates,
    so every off-diagonal entry counts.
    """
    if isinstance(batch_or_sim, LossBatch):
        dn, valid = hardest_negatives(batch_or_sim, safe_radius)
        d_p = np.diag(batch_or_sim.sim.data)
        dn_mean = float(dn.data[valid].mean()) if valid.any() else float("nan")
        return float(d_p.mean()), dn_mean
    sim = np.asarray(getattr(batch_or_sim, "data", batch_or_sim))
    B = sim.shape[0]
    d_p = np.diag(sim)
    off = np.where(np.eye(B, dtype=bool), -np.inf, sim)
    dn = np.maximum(off.max(axis=1), off.max(axis=0))
    return float(d_p.mean()), float(dn.mean())
