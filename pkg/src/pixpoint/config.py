"""Run configuration with all defaults in one place.

``DEFAULTS`` doubles as the documented schema: every key a config file may
set appears here with its default value.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import InvalidInputError

DEFAULTS = {
    "seed": 0,
    "pipeline": {"voxel_size": 0.015, "eta": 0.015, "min_correspondences": 128,
                 "noise_sigma": 0.005, "frames_per_fragment": 5},
    "synth": {"n_scenes": 25, "points_per_scene": 120000, "image_size": 64, "train_fraction": 0.8,
              "texture": "cells"},
    "extractor_2d": {"channels": [8, 8, 16, 16, 32, 32, 32, 32, 32],
                     "dilations": [1, 1, 2, 2, 4, 4, 4, 8, 16], "descriptor_dim": 32, "leaky_slope": 0.1},
    "extractor_3d": {"radii": [0.04, 0.08], "widths": [16, 32], "descriptor_dim": 32, "max_neighbors": 24},
    "detection": {"window_radius": 2, "cloud_radius": 0.03, "edge_ratio": 10.0, "top_k": 1000,
                  "use_normalized": False},
    "loss": {"kind": "circle", "m": 0.2, "zeta": 10.0, "circle_form": "as_written", "safe_radius": True,
             "R_I": 12.0, "R_P": 0.015, "M": 0.2, "M_p": 0.9, "M_n": 0.2, "literal_triplet": False},
    "train": {"epochs": 10, "batch_corr": 128, "lambda": 1.0, "two_stage": True, "base_lr": 1e-4,
              "final_lr_fraction": 0.1, "augment_noise": True, "dtype": "float64",
              "clip_grad_norm": 0.0},
    "metrics": {"tau1": 0.5, "tau2": 0.045, "tau3": 0.02, "tau4": 0.05},
    "ransac": {"max_iterations": 1000, "sample_size": 6, "inlier_threshold": 0.045, "confidence": 0.999},
}

LOSS_KINDS = ("circle", "triplet", "contrastive")


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in out:
            raise InvalidInputError(f"unknown config key {path}{key}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise InvalidInputError(f"config key {path}{key} must be an object")
            out[key] = _merge(out[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def validate(cfg: dict) -> dict:
    t, lo = cfg["train"], cfg["loss"]
    if int(t["epochs"]) < 1 or int(t["batch_corr"]) < 1 or float(t["lambda"]) < 0:
        raise InvalidInputError("train: need epochs >= 1, batch_corr >= 1, lambda >= 0")
    if lo["kind"] not in LOSS_KINDS:
        raise InvalidInputError(f"loss.kind must be one of {LOSS_KINDS}")
    if lo["circle_form"] not in ("as_written", "canonical"):
        raise InvalidInputError("loss.circle_form must be as_written or canonical")
    if float(t["clip_grad_norm"]) < 0:
        raise InvalidInputError("train.clip_grad_norm must be >= 0 (0 disables clipping)")
    if t["dtype"] not in ("float64", "float32"):
        raise InvalidInputError("train.dtype must be float64 or float32")
    if cfg["extractor_2d"]["descriptor_dim"] != cfg["extractor_3d"]["descriptor_dim"]:
        raise InvalidInputError("descriptor_dim must match across modalities")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidInputError(f"cannot read config {path}: {e}") from e
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def schema() -> dict:
    """JSON schema describing the config document (types taken from the defaults)."""
    def node(v):
        if isinstance(v, dict):
            return {"type": "object", "additionalProperties": False,
                    "properties": {k: node(x) for k, x in v.items()}}
        if isinstance(v, bool):
            return {"type": "boolean", "default": v}
        if isinstance(v, int):
            return {"type": "integer", "default": v}
        if isinstance(v, float):
            return {"type": "number", "default": v}
        if isinstance(v, list):
            return {"type": "array", "default": v}
        return {"type": "string", "default": v}
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", **node(DEFAULTS)}
