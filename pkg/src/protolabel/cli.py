"""Command-line front end.

Every subcommand reads one JSON config (``--config``) and works on a work
directory (``--out``). ``run`` does all stages at once; the others run one
stage each and pick up the previous stage's files, so a stage can be
repeated with different settings without redoing the earlier ones::

    protolabel synth  --config demo.json --out work
    protolabel label  --config demo.json --out work --jobs 4
    protolabel score  --config demo.json --out work --dump-components parts.csv
    protolabel proto  --config demo.json --out work
    protolabel refine --config demo.json --out work --report refine.csv
    protolabel eval   --config demo.json --out work --iou 0.5,0.7
    protolabel losses --pairs pairs.json

Log verbosity comes from the ``PROTOLABEL_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``...; default ``WARNING``). Each stage logs
one JSON object with its counts and timings.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__, pipeline, scene_io
from .cst import CstConfig, box_contrast_loss, css_weight, feature_contrast_loss, pairs_from_json, weighted_detection_loss
from .errors import ConfigError, ProtolabelError

LOG_ENV = "PROTOLABEL_LOG"


def _iou_list(text: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty IoU list")
    return values


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protolabel", description="Unsupervised 3D pseudo-labels on synthetic LiDAR.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    common.add_argument("--seed", type=_u64, help="override the config's global seed")
    common.add_argument("--out", default="protolabel_out", help="work directory (default: %(default)s)")

    p = sub.add_parser("synth", parents=[common], help="generate synthetic sequences and ground truth")
    p.add_argument("--frames", type=_positive, help="frames per sequence (overrides synth.num_frames)")
    p = sub.add_parser("label", parents=[common], help="multi-frame clustering labels")
    p.add_argument("--jobs", type=_positive, default=1, help="sequences processed in parallel")
    p = sub.add_parser("score", parents=[common], help="css scores for the labels")
    p.add_argument("--dump-components", metavar="CSV", help="write distance/occupancy/size parts per label")
    sub.add_parser("proto", parents=[common], help="build the prototype set")
    p = sub.add_parser("refine", parents=[common], help="refine scored labels with the prototypes")
    p.add_argument("--report", metavar="CSV", help="write a per-label refinement report")
    p = sub.add_parser("eval", parents=[common], help="metrics against ground truth")
    p.add_argument("--iou", type=_iou_list, help="comma-separated IoU thresholds (overrides eval.thresholds)")
    p = sub.add_parser("run", parents=[common], help="all stages end to end")
    p.add_argument("--jobs", type=_positive, default=1, help="sequences processed in parallel")
    p.add_argument("--frames", type=_positive, help="frames per sequence (overrides synth.num_frames)")
    p.add_argument("--iou", type=_iou_list, help="comma-separated IoU thresholds (overrides eval.thresholds)")

    p = sub.add_parser("losses", help="self-training loss values for proposal pairs")
    p.add_argument("--pairs", required=True, help="JSON file with a 'pairs' list")
    p.add_argument("--config", help="JSON config; its 'cst' section sets the weight ramp")
    p.add_argument("--css", action="store_true", help="treat each pair's 'weight' as a css score and ramp it")
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    """Config from ``--config`` with command-line overrides applied (validated)."""
    raw = scene_io.load_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "frames", None) is not None:
        raw["synth"] = {**raw.get("synth", {}), "num_frames": args.frames}
    if getattr(args, "iou", None) is not None:
        raw["eval"] = {**raw.get("eval", {}), "thresholds": list(args.iou)}
    return pipeline.PipelineConfig.from_dict(raw)


def _losses(args) -> dict:
    doc = scene_io.load_json(args.pairs)
    cst_cfg = CstConfig()
    if args.config:
        cfg = scene_io.load_json(args.config)
        cst_cfg = CstConfig.from_dict(cfg.get("cst", {})) if isinstance(cfg, dict) else cst_cfg
    try:
        pairs = pairs_from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed pairs file {args.pairs}: {exc}") from None
    if args.css:
        for p in pairs:
            p.weight = css_weight(p.weight, cst_cfg)
    out = {"pairs": len(pairs), "detection": weighted_detection_loss(pairs), "box_contrast": box_contrast_loss(pairs)}
    if all(p.det_feat is not None and p.proto_feat is not None for p in pairs):
        out["feature_contrast"] = feature_contrast_loss(pairs)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "losses":
            print(json.dumps(_losses(args), sort_keys=True))
            return 0
        config = load_config(args)
        out = args.out
        if args.command == "synth":
            ids = pipeline.stage_synth(config, out)
            print(f"wrote {len(ids)} sequences to {out}")
        elif args.command == "label":
            pipeline.stage_label(config, out, args.jobs)
        elif args.command == "score":
            pipeline.stage_score(config, out, args.dump_components)
        elif args.command == "proto":
            print(f"built {pipeline.stage_proto(config, out)} prototypes")
        elif args.command == "refine":
            print(json.dumps(pipeline.stage_refine(config, out, args.report), sort_keys=True))
        elif args.command == "eval":
            _print_summary(pipeline.stage_eval(config, out))
        elif args.command == "run":
            _print_summary(pipeline.run_pipeline(config, out, args.jobs))
    except ProtolabelError as exc:
        print(f"protolabel {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"protolabel {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def _print_summary(metrics: dict):
    for name, rep in metrics["stages"].items():
        recall = " ".join(f"R@{t}={v:.3f}" for t, v in rep["recall"].items())
        ap = " ".join(f"AP@{t}={v:.3f}" for t, v in rep["ap"]["all"].items())
        print(f"{name:13s} {recall}  {ap}")
    fid = metrics["css_fidelity"]
    print(f"css fidelity  spearman css={fid['spearman_css']:.3f} distance={fid['spearman_distance']:.3f}")


if __name__ == "__main__":
    sys.exit(main())
