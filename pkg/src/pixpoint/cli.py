"""Command-line entry point: ``pixpoint <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

log = logging.getLogger("pixpoint")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see `pixpoint schema`)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bitwise reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pixpoint", description="Pixel/point keypoint learning toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic RGB-D dataset")
    s.add_argument("--n-scenes", type=int)
    s.add_argument("--points-per-scene", type=int)
    s.add_argument("--image-size", type=int)
    s = sub.add_parser("preprocess", parents=[common], help="fuse, subsample and label raw scenes")
    s.add_argument("raw", help="directory of raw scenes")
    s = sub.add_parser("train", parents=[common], help="train the extractors and detector")
    s.add_argument("dataset")
    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    s.add_argument("dataset")
    s.add_argument("checkpoint")
    s.add_argument("--top-k", type=int)
    s.add_argument("--split", default="test")
    s = sub.add_parser("trace", parents=[common], help="per-epoch plot data from a trace.csv")
    s.add_argument("trace")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return p


def _set_threads(n: int) -> None:
    # must run before numpy is imported to take effect
    for var in _THREAD_VARS:
        os.environ[var] = str(max(1, n))


def _config(args):
    from .config import load_config
    over = {"seed": args.seed} if args.seed is not None else None
    return load_config(args.config, over)


def _manifest(out: Path, verb: str, cfg: dict, inputs: list, outputs: list, **extra) -> None:
    from .data import dump_json
    from .pipeline import content_hash
    dump_json(out / "manifest.json", {
        "verb": verb, "config": cfg, "seed": cfg["seed"],
        "input_hash": content_hash([Path(p) for p in inputs]) if inputs else None,
        "outputs": sorted(outputs), **extra})


def _cmd_synth(args, cfg, out: Path) -> int:
    from .data import PipelineConfig
    from .synth import SynthConfig, generate
    sc = dict(cfg["synth"])
    for key in ("n_scenes", "points_per_scene", "image_size"):
        if getattr(args, key) is not None:
            sc[key] = getattr(args, key)
    pc = cfg["pipeline"]
    synth_cfg = SynthConfig(n_scenes=sc["n_scenes"], points_per_scene=sc["points_per_scene"],
                            image_size=sc["image_size"], train_fraction=sc["train_fraction"],
                            frames_per_scene=pc["frames_per_fragment"], seed=int(cfg["seed"]),
                            texture=sc["texture"])
    index = generate(out, synth_cfg, PipelineConfig(**pc))
    _manifest(out, "synth", cfg, [], ["raw", "pairs", "dataset.json"])
    print(f"{len(index['train'])} train / {len(index['test'])} test pairs, {len(index['skipped'])} skipped")
    return EXIT_OK


def _cmd_preprocess(args, cfg, out: Path) -> int:
    from .data import PipelineConfig
    from .synth import preprocess
    index = preprocess(args.raw, out, PipelineConfig(**cfg["pipeline"]), cfg["synth"]["train_fraction"])
    _manifest(out, "preprocess", cfg, [args.raw], ["pairs", "dataset.json"])
    print(f"{len(index['train'])} train / {len(index['test'])} test pairs, {len(index['skipped'])} skipped")
    return EXIT_OK


def _cmd_train(args, cfg, out: Path) -> int:
    from .pipeline import read_trace, train, trace_plotdata
    train(args.dataset, cfg, out)
    per_epoch = trace_plotdata(read_trace(out / "trace.csv"))
    _manifest(out, "train", cfg, [Path(args.dataset) / "pairs", Path(args.dataset) / "dataset.json"],
              ["checkpoint.pt", "trace.csv"], per_epoch=per_epoch)
    last = per_epoch[-1]
    print(f"epoch {last['epoch']}: mean d_p {last['mean_dp']:.4f}  mean d_n* {last['mean_dn_star']:.4f}")
    return EXIT_OK


def _cmd_eval(args, cfg, out: Path) -> int:
    from .pipeline import Model, evaluate
    from .autodiff import load_checkpoint
    _, extra = load_checkpoint(args.checkpoint)
    model_cfg = extra.get("config", cfg)
    if args.config or args.seed is not None:
        # thresholds and RANSAC settings may be overridden; the architecture comes from the checkpoint
        model_cfg = {**model_cfg, "metrics": cfg["metrics"], "ransac": cfg["ransac"], "seed": cfg["seed"]}
    model = Model.load(args.checkpoint, model_cfg)
    summary, missing = evaluate(args.dataset, model, out, args.split, args.top_k)
    _manifest(out, "eval", model_cfg, [Path(args.dataset) / "pairs", Path(args.checkpoint)],
              ["metrics.json", "metrics.csv", "poses.json", "keypoints"])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_DATA if missing else EXIT_OK


def _cmd_trace(args, cfg, out: Path) -> int:
    import csv
    from .pipeline import read_trace, trace_plotdata
    rows = trace_plotdata(read_trace(args.trace))
    cols = ["epoch", "last_step", "mean_dp", "mean_dn_star", "loss_desc", "loss_det"]
    with open(out / "trace_plot.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (f"{r[c]:.10g}" if isinstance(r[c], float) else r[c]) for c in cols])
    return EXIT_OK


COMMANDS = {"synth": _cmd_synth, "preprocess": _cmd_preprocess, "train": _cmd_train, "eval": _cmd_eval,
            "trace": _cmd_trace}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.verb == "schema":
        from .config import schema
        print(json.dumps(schema(), indent=2))
        return EXIT_OK
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import DegenerateConfigurationError, InvalidInputError, NumericError
    from .pipeline import Divergence
    try:
        cfg = _config(args)
    except InvalidInputError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.verb](args, cfg, out)
    except (Divergence, NumericError) as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, InvalidInputError, DegenerateConfigurationError, ValueError, KeyError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
