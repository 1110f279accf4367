"""Training and evaluation loops over a directory of labeled pairs."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, load_checkpoint, save_checkpoint
from .data import Fragment, augment_noise, dump_json, standardize_image
from .detection import (CloudNeighborhood, DetectionConfig, detect_keypoints, detection_maps, init_detector,
                        soft_scores)
from .errors import NumericError, RegistrationFailure
from .extractors import (Extractor2DConfig, Extractor3DConfig, PointNeighborhoods, extract_2d, extract_3d,
                         init_2d, init_3d)
from .geometry import pixel_grid
from .losses import (CircleParams, MarginParams, build_batch, circle_descriptor_loss, combined_loss,
                     detector_loss, hard_contrastive_loss, hard_triplet_loss)
from .losses import trace as similarity_trace
from .metrics import (MetricThresholds, PairGeometry, feature_matching_recall, inlier_ratio,
                      keypoint_repeatability, mutual_nn_match, recall, registration_rmse)
from .registration import RansacConfig, ransac_pnp

log = logging.getLogger(__name__)

TRACE_HEADER = ["step", "epoch", "loss_desc", "loss_det", "mean_dp", "mean_dn_star"]


class Divergence(RuntimeError):
    def __init__(self, step: int, cause: Exception | None = None):
        super().__init__(f"loss diverged at step {step}" + (f" ({cause})" if cause else ""))
        self.step = step


@dataclass
class Model:
    cfg: dict
    params: dict

    @property
    def cfg2d(self) -> Extractor2DConfig:
        c = self.cfg["extractor_2d"]
        return Extractor2DConfig(tuple(c["channels"]), tuple(c["dilations"]), c["descriptor_dim"], c["leaky_slope"])

    @property
    def cfg3d(self) -> Extractor3DConfig:
        c = self.cfg["extractor_3d"]
        return Extractor3DConfig(tuple(c["radii"]), tuple(c["widths"]), c["descriptor_dim"], c["max_neighbors"])

    @property
    def det_cfg(self) -> DetectionConfig:
        return DetectionConfig(**self.cfg["detection"])

    @classmethod
    def init(cls, cfg: dict, seed: int) -> "Model":
        probe = cls(cfg, {})
        params = {}
        params.update(init_2d(probe.cfg2d, [seed, 2]))
        params.update(init_3d(probe.cfg3d, [seed, 3]))
        params.update(init_detector(probe.cfg2d.descriptor_dim))
        dtype = np.dtype(cfg["train"]["dtype"])
        for p in params.values():
            p.data = p.data.astype(dtype)
        return cls(cfg, params)

    def save(self, path) -> None:
        save_checkpoint(path, self.params, {"config": self.cfg})

    @classmethod
    def load(cls, path, cfg: dict | None = None) -> "Model":
        arrays, extra = load_checkpoint(path)
        cfg = cfg or extra["config"]
        return cls(cfg, {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()})

    def detector_params(self) -> list:
        return sorted(k for k in self.params if k.startswith("det."))


@dataclass
class PairInputs:
    frag: Fragment
    image: np.ndarray
    cloud: object
    pts_nbr: PointNeighborhoods
    det_nbr: CloudNeighborhood
    pixel_uv: np.ndarray


def prepare_pair(frag: Fragment, model: Model, noise_seed=None) -> PairInputs:
    img, _ = standardize_image(frag.image)
    sigma = model.cfg["pipeline"]["noise_sigma"]
    cloud = frag.cloud if noise_seed is None else augment_noise(frag.cloud, sigma, noise_seed)
    dtype = np.dtype(model.cfg["train"]["dtype"])
    return PairInputs(frag, img.astype(dtype), cloud, PointNeighborhoods.build(cloud.points, model.cfg3d),
                      CloudNeighborhood.build(cloud.points, model.det_cfg), pixel_grid(frag.intrinsics))


def forward(model: Model, inp: PairInputs):
    """Features, detection maps and soft scores for both modalities."""
    fi = extract_2d(inp.image, model.cfg2d, model.params)
    fp = extract_3d(inp.cloud, model.cfg3d, model.params, inp.pts_nbr)
    Di = detection_maps(fi, model.params, "img", model.det_cfg)
    Dp = detection_maps(fp, model.params, "pts", model.det_cfg)
    return fi, fp, Di, Dp


def descriptor_loss(batch, cfg: dict):
    lo = cfg["loss"]
    if lo["kind"] == "circle":
        return circle_descriptor_loss(batch, CircleParams(lo["m"], lo["zeta"]), lo["circle_form"], lo["safe_radius"])
    margins = MarginParams(lo["M"], lo["M_p"], lo["M_n"])
    if lo["kind"] == "triplet":
        return hard_triplet_loss(batch, margins, literal=lo["literal_triplet"], safe_radius=lo["safe_radius"])
    return hard_contrastive_loss(batch, margins, safe_radius=lo["safe_radius"])


def list_pairs(dataset, split: str) -> list:
    dataset = Path(dataset)
    index = json.loads((dataset / "dataset.json").read_text())
    return [dataset / "pairs" / n for n in index[split]]


def train(dataset, cfg: dict, out, split: str = "train", progress=None) -> Model:
    """Train on every pair of ``split``; writes checkpoint.pt and trace.csv under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    tc, lo = cfg["train"], cfg["loss"]
    frags = [Fragment.load(p) for p in list_pairs(dataset, split)]
    B = int(tc["batch_corr"])
    usable = [f for f in frags if len(f.corr) >= B]
    if len(usable) < len(frags):
        log.warning("%d pairs with fewer than %d correspondences skipped", len(frags) - len(usable), B)
    model = Model.init(cfg, seed)
    opt = Adam(model.params, base_lr=float(tc["base_lr"]), clip_norm=float(tc["clip_grad_norm"]))
    E = int(tc["epochs"])
    step = 0
    rows = []
    for epoch in range(1, E + 1):
        opt.lr = float(tc["base_lr"]) * float(tc["final_lr_fraction"]) ** ((epoch - 1) / E)
        use_det = (epoch >= 2 or not tc["two_stage"])
        order = np.random.default_rng([seed, epoch]).permutation(len(usable))
        for pi in order:
            frag = usable[pi]
            step += 1
            noise_seed = [seed, epoch, int(pi)] if tc["augment_noise"] else None
            inp = prepare_pair(frag, model, noise_seed)
            try:
                fi, fp, Di, Dp = forward(model, inp)
                Si = Sp = None
                if use_det:
                    Si = soft_scores(Di, fi.grid, None, model.det_cfg)
                    Sp = soft_scores(Dp, None, inp.det_nbr, model.det_cfg)
                batch = build_batch(fi, fp, frag.corr, inp.pixel_uv, inp.cloud.points, B, [seed, step],
                                    Si, Sp, lo["R_I"], lo["R_P"])
                l_desc = descriptor_loss(batch, cfg)
                l_det = detector_loss(batch) if use_det else None
                total = combined_loss(l_desc, l_det, float(tc["lambda"]))
                if not np.isfinite(total.item()):
                    raise Divergence(step)
                opt.zero_grad()
                ad.backward(total)
            except NumericError as e:
                raise Divergence(step, e) from e
            opt.step()
            dp, dn = similarity_trace(batch, lo["safe_radius"])
            rows.append([step, epoch, f"{l_desc.item():.10g}", "" if l_det is None else f"{l_det.item():.10g}",
                         f"{dp:.10g}", f"{dn:.10g}"])
            if progress:
                progress(rows[-1])
    model.save(out / "checkpoint.pt")
    write_trace(out / "trace.csv", rows)
    return model


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(rows)


def read_trace(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def trace_plotdata(rows) -> list:
    """Per-epoch means of (d_p, d_n*) and of the recorded losses."""
    if not rows:
        raise ValueError("empty trace")
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append(r)
    out = []
    for e in sorted(by_epoch):
        rs = by_epoch[e]
        det = [float(r["loss_det"]) for r in rs if r["loss_det"] not in ("", None)]
        out.append({"epoch": e, "last_step": max(int(r["step"]) for r in rs),
                    "mean_dp": float(np.mean([float(r["mean_dp"]) for r in rs])),
                    "mean_dn_star": float(np.mean([float(r["mean_dn_star"]) for r in rs])),
                    "loss_desc": float(np.mean([float(r["loss_desc"]) for r in rs])),
                    "loss_det": float(np.mean(det)) if det else None})
    return out


def similarity_gap(rows, epoch: int | None = None) -> float:
    """mean d_p - mean d_n* over the steps of ``epoch`` (default: the last one)."""
    epoch = max(int(r["epoch"]) for r in rows) if epoch is None else epoch
    sel = [r for r in rows if int(r["epoch"]) == epoch]
    return float(np.mean([float(r["mean_dp"]) for r in sel]) - np.mean([float(r["mean_dn_star"]) for r in sel]))


# --- evaluation -----------------------------------------------------------------

def evaluate_pair(model: Model, frag: Fragment, top_k: int | None = None) -> dict:
    inp = prepare_pair(frag, model)
    fi, fp, Di, Dp = forward(model, inp)
    det = model.det_cfg
    if top_k is not None:
        det = DetectionConfig(**{**model.cfg["detection"], "top_k": int(top_k)})
    Si = soft_scores(Di, fi.grid, None, det)
    Sp = soft_scores(Dp, None, inp.det_nbr, det)
    kp_i = detect_keypoints(fi, Di, Si, det)
    kp_p = detect_keypoints(fp, Dp, Sp, det, inp.det_nbr)
    res = score_pair(frag, fi.desc.data, fp.desc.data, kp_i, kp_p, model.cfg)
    res["keypoints"] = {"image": (kp_i, Si.data[kp_i]), "cloud": (kp_p, Sp.data[kp_p])}
    return res


def write_keypoints_csv(path, idx, scores, uv=None) -> None:
    """``index,u,v_or_point_id,score`` sorted by descending score (ties by index).

    Image rows carry the pixel index and its (u, v); cloud rows leave ``u``
    empty and repeat the point id in the third column.
    """
    idx = np.asarray(idx, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((idx, -scores))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "u", "v_or_point_id", "score"])
        for o in order:
            if uv is None:
                w.writerow([int(idx[o]), "", int(idx[o]), f"{scores[o]:.10g}"])
            else:
                w.writerow([int(idx[o]), int(uv[idx[o], 0]), int(uv[idx[o], 1]), f"{scores[o]:.10g}"])


def score_pair(frag: Fragment, desc_i, desc_p, kp_i, kp_p, cfg: dict) -> dict:
    """Match keypoint descriptors and compute all per-pair metrics."""
    th = MetricThresholds(**cfg["metrics"])
    geom = PairGeometry.from_depth(frag.depth, frag.intrinsics, frag.cloud.points, frag.pose)
    ms = mutual_nn_match(desc_i[kp_i], desc_p[kp_p])
    rows, cols = kp_i[ms.rows], kp_p[ms.cols]
    matches = np.stack([rows, cols], axis=1)
    ir = inlier_ratio(matches, geom, th.tau2)
    kr = keypoint_repeatability(kp_i, kp_p, geom, th.tau3)
    rc = recall(matches, len(frag.corr), geom, th.tau2)
    rcfg = RansacConfig(**cfg["ransac"], seed=int(cfg["seed"]))
    pose_hat, inl = None, np.zeros(0, dtype=np.int64)
    keep = geom.valid[rows] if len(rows) else np.zeros(0, dtype=bool)
    try:
        uv = pixel_grid(frag.intrinsics)[rows]
        pose_hat, inl = ransac_pnp(uv, geom.cam_points[rows], frag.cloud.points[cols],
                                   frag.intrinsics, rcfg, valid=keep)
    except RegistrationFailure:
        pass
    rmse = float("inf") if pose_hat is None else registration_rmse(pose_hat, frag.corr.pixel_idx,
                                                                    frag.corr.point_idx, geom)
    return {"n_kp_image": int(len(kp_i)), "n_kp_cloud": int(len(kp_p)), "n_matches": int(len(rows)),
            "IR": ir.value, "KR": kr.value, "Recall": rc, "reg_rmse": rmse, "reg_inliers": int(len(inl)),
            "registered": bool(rmse < th.tau4), "flags": ir.flags + kr.flags,
            "T_hat": None if pose_hat is None else pose_hat.matrix.ravel().tolist(),
            "inliers": [[int(rows[i]), int(cols[i])] for i in inl]}


def aggregate(per_pair: list, cfg: dict) -> dict:
    th = MetricThresholds(**cfg["metrics"])
    if not per_pair:
        raise ValueError("no pairs evaluated")
    return {"FMR": feature_matching_recall([p["IR"] for p in per_pair], th.tau1),
            "IR_mean": float(np.mean([p["IR"] for p in per_pair])),
            "KR_mean": float(np.mean([p["KR"] for p in per_pair])),
            "Recall_mean": float(np.mean([p["Recall"] for p in per_pair])),
            "RegRecall": float(np.mean([p["registered"] for p in per_pair])),
            "n_pairs": len(per_pair)}


def evaluate(dataset, model: Model, out, split: str = "test", top_k: int | None = None) -> tuple[dict, list]:
    """Evaluate every pair of ``split``; writes metrics.json and metrics.csv under ``out``.

    Pairs with missing files are reported in ``missing`` and skipped.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    per_pair, missing = [], []
    for p in list_pairs(dataset, split):
        try:
            frag = Fragment.load(p)
        except FileNotFoundError as e:
            log.error("%s", e)
            missing.append(p.name)
            continue
        res = evaluate_pair(model, frag, top_k)
        res["pair"] = p.name
        kps = res.pop("keypoints")
        kdir = out / "keypoints"
        kdir.mkdir(exist_ok=True)
        write_keypoints_csv(kdir / f"{p.name}_image.csv", *kps["image"], uv=pixel_grid(frag.intrinsics))
        write_keypoints_csv(kdir / f"{p.name}_cloud.csv", *kps["cloud"])
        per_pair.append(res)
    summary = aggregate(per_pair, model.cfg) if per_pair else {"n_pairs": 0}
    if missing:
        summary["missing"] = missing
    dump_json(out / "metrics.json", summary)
    dump_json(out / "poses.json", {r["pair"]: {"T_hat": r["T_hat"], "inliers": r["inliers"]} for r in per_pair})
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        cols = ["pair", "n_kp_image", "n_kp_cloud", "n_matches", "IR", "KR", "Recall", "reg_rmse", "registered"]
        w.writerow(cols)
        for r in per_pair:
            w.writerow([r[c] if not isinstance(r[c], float) else f"{r[c]:.10g}" for c in cols])
    return summary, missing


def content_hash(paths) -> str:
    """sha256 over the bytes of every file under ``paths`` (sorted by relative path)."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for f in files:
            h.update(str(f.relative_to(root.parent)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()
