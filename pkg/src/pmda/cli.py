"""Command-line entry point: ``pmda <subcommand> --manifest M --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import pipeline
from .errors import ManifestError, MissingArtifactError, PMDAError
from .manifest import load_manifest

EXIT_OK, EXIT_FAILED, EXIT_MISSING, EXIT_MANIFEST = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

STAGES = ["gen-data", "train-style", "make-pseudo", "train-seg", "confuse", "build-space", "infer", "evaluate",
          "extract-segments"]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", required=True, type=Path, help="run manifest (JSON)")
    common.add_argument("--out", required=True, type=Path, help="work/output directory")
    common.add_argument("--seed", type=int, default=None, help="override the manifest seed")

    parser = argparse.ArgumentParser(prog="pmda", description="Multi-sub-domain segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus and write a full manifest")
    sub.add_parser("train-style", parents=[common], help="train the AdaIN style-transfer model")
    p = sub.add_parser("make-pseudo", parents=[common], help="stylise the source set once per sub-domain")
    p.add_argument("--alpha", type=float, default=None, help="content/style interpolation weight in [0, 1]")
    for name, text in (("train-seg", "train per-domain models and the source-only baseline"),
                       ("confuse", "adversarial confusion against each sub-domain")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--parallel-domains", type=int, default=1, metavar="N")
    sub.add_parser("build-space", parents=[common], help="fit the style feature space")
    p = sub.add_parser("infer", parents=[common], help="multi-domain inference")
    p.add_argument("--image", type=Path, default=None, help="single P6 image; default: every test image")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--fuse-mode", choices=("prob", "logit"), default=None)
    p = sub.add_parser("evaluate", parents=[common], help="mIoU reports")
    p.add_argument("--pred", type=Path, default=None, help="directory of predicted label maps")
    p.add_argument("--gt", type=Path, default=None, help="directory of ground-truth label maps")
    p = sub.add_parser("extract-segments", parents=[common], help="cut class segments into a collection")
    p.add_argument("--class", dest="class_name", default=None, help="class name or id (default: all)")
    p.add_argument("--pred", type=Path, default=None, help="prediction directory from infer (default: ground truth)")
    p.add_argument("--min-area", type=int, default=4)
    p = sub.add_parser("run-all", parents=[common], help="every stage in order with one seed")
    p.add_argument("--parallel-domains", type=int, default=1, metavar="N")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--fuse-mode", choices=("prob", "logit"), default=None)
    return parser


def _load(path, seed):
    manifest = load_manifest(path)
    if seed is not None:
        manifest.seed = seed
    return manifest


def _record(ws, stage, manifest, started, artifacts, metrics):
    missing = [str(a) for a in artifacts if not Path(a).exists()]
    if missing:
        raise MissingArtifactError(missing[0])
    rec = {"stage": stage, "manifest_hash": manifest.digest(), "seed": manifest.seed,
           "wall_time": round(time.time() - started, 3), "artifacts": sorted(str(a) for a in artifacts),
           "metrics": metrics}
    with open(ws.path("runs.jsonl"), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")


def run_stage(stage, manifest, ws, args, emit=print):
    started = time.time()
    parallel = getattr(args, "parallel_domains", 1)
    if stage == "gen-data":
        result = pipeline.stage_gen_data(manifest, ws)
    elif stage == "train-style":
        result = pipeline.stage_train_style(manifest, ws)
    elif stage == "make-pseudo":
        result = pipeline.stage_make_pseudo(manifest, ws, getattr(args, "alpha", None))
    elif stage == "train-seg":
        result = pipeline.stage_train_seg(manifest, ws, parallel)
    elif stage == "confuse":
        result = pipeline.stage_confuse(manifest, ws, parallel)
    elif stage == "build-space":
        result = pipeline.stage_build_space(manifest, ws)
    elif stage == "infer":
        result = pipeline.stage_infer(manifest, ws, getattr(args, "image", None), getattr(args, "k", None),
                                      getattr(args, "fuse_mode", None), emit=emit)
    elif stage == "evaluate":
        result = pipeline.stage_evaluate(manifest, ws, getattr(args, "pred", None), getattr(args, "gt", None),
                                         emit=emit)
    elif stage == "extract-segments":
        result = pipeline.stage_extract_segments(manifest, ws, getattr(args, "class_name", None),
                                                 getattr(args, "pred", None), getattr(args, "min_area", 4))
    else:
        raise ValueError(f"unknown stage {stage}")
    _record(ws, stage, manifest, started, *result)
    return result


def run_all(args, emit=print):
    ws = pipeline.Workspace(args.out)
    manifest = _load(args.manifest, args.seed)
    if manifest.data is None:
        run_stage("gen-data", manifest, ws, args, emit)
        manifest = _load(ws.out / "manifest.json", args.seed)
    for stage in ("train-style", "make-pseudo", "train-seg", "confuse", "build-space", "infer", "evaluate"):
        logging.getLogger("pmda").info("stage %s", stage)
        run_stage(stage, manifest, ws, args, emit)
    run_stage("extract-segments", manifest, ws, argparse.Namespace(class_name=None, pred=ws.out / "pred",
                                                                   min_area=4), emit)


def main(argv=None):
    level = LOG_LEVELS.get(os.environ.get("PMDA_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run-all":
            run_all(args)
        else:
            manifest = _load(args.manifest, args.seed)
            run_stage(args.command, manifest, pipeline.Workspace(args.out), args)
    except ManifestError as e:
        print(f"error[manifest]: {e}", file=sys.stderr)
        return EXIT_MANIFEST
    except MissingArtifactError as e:
        print(f"error[missing-artifact]: {e.path}", file=sys.stderr)
        return EXIT_MISSING
    except PMDAError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
