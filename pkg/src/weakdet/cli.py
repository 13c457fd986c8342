"""Command-line entry point: gen-phantom, train, eval, infer, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import phantom, pipeline
from .config import RunConfig
from .errors import ConfigError, DataError, WeakDetError
from .metrics import MatchCriterion, export_offsets, write_report
from .postprocess import BoundingBox, write_detections
from .preprocess import stack_frames

log = logging.getLogger("weakdet")

SPLIT_FIELDS = ["sequence_id", "frame_index", "split"]


# --------------------------------------------------------------------------
# splits

def make_splits(cfg, dataset):
    """(train, val, test) keys for ``cfg.data``."""
    d = cfg.data
    if d.split == "subject":
        if d.holdout_subject not in dataset.sequences:
            raise ConfigError(f"data.holdout_subject: no sequence {d.holdout_subject!r}")
        test = [k for k in dataset.keys() if k[0] == d.holdout_subject]
        rest = [k for k in dataset.keys() if k[0] != d.holdout_subject]
        train, val, _ = phantom.random_split(rest, (80, 20, 0), d.seed)
    else:
        train, val, test = phantom.random_split(dataset.keys(), (64, 16, 20), d.seed)
    train = phantom.subset(train, d.train_fraction, d.seed)
    return train, val, test


def write_splits(path, splits):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(SPLIT_FIELDS)
        for name, keys in zip(("train", "val", "test"), splits):
            for s, t in keys:
                wr.writerow([s, t, name])


def read_splits(path, which):
    try:
        with open(path, newline="") as f:
            rd = csv.DictReader(f)
            if rd.fieldnames != SPLIT_FIELDS:
                raise DataError(f"{path}: unexpected header {rd.fieldnames}")
            return [(r["sequence_id"], int(r["frame_index"])) for r in rd if r["split"] == which]
    except FileNotFoundError as e:
        raise DataError(f"missing split file {path}") from e
    except ValueError as e:
        raise DataError(f"{path}: malformed row ({e})") from e


# --------------------------------------------------------------------------
# commands

def cmd_gen_phantom(args):
    cfg = phantom.PhantomConfig(
        n_subjects=args.subjects, frames_per_subject=args.frames, image_h=args.size,
        image_w=args.size, absent_fraction=args.absent_fraction,
        mm_per_pixel=args.mm_per_pixel, seed=args.seed)
    manifest, _ = phantom.generate(cfg, args.out)
    print(manifest)
    return 0


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    if args.out:
        cfg.output_dir = args.out
    if not cfg.data.dataset:
        raise ConfigError("data.dataset is not set")
    dataset = phantom.load(cfg.data.dataset)
    splits = make_splits(cfg, dataset)
    out = Path(cfg.output_dir)
    result = pipeline.train(cfg, dataset, splits[0], splits[1], out_dir=out,
                            progress=None if args.quiet else print)
    write_splits(out / "splits.csv", splits)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if splits[2]:
        report, labs, dets = pipeline.evaluate_keys(result.detector, dataset, splits[2])
        write_report(out / "test", report, labs)
        print(f"test precision {report.precision} recall {report.recall}")
    print(out / "checkpoint.wbx")
    return 0


def _post_override(det, args):
    post = det.post
    if getattr(args, "logic", None):
        post.decision_logic = args.logic
    if getattr(args, "sigmoid_threshold", None) is not None:
        post.sigmoid_threshold = args.sigmoid_threshold
    post.__post_init__()
    return post


def cmd_eval(args):
    det = pipeline.Detector.load(args.checkpoint)
    _post_override(det, args)
    dataset = phantom.load(args.data)
    det.check_dataset(dataset)
    keys = read_splits(args.splits, args.subset) if args.splits else dataset.keys()
    if not keys:
        raise DataError("no frames selected for evaluation")
    criterion = MatchCriterion(args.criterion, iou_threshold=args.iou, distance_mm=args.mm,
                               mm_per_pixel=dataset.mm_per_pixel)
    report, labs, dets = pipeline.evaluate_keys(det, dataset, keys, criterion)
    out = Path(args.out)
    write_report(out, report, labs)
    write_detections(out / "detections.csv", [(k[0], k[1], dets[k]) for k in keys])
    if report.offsets_mm:
        export_offsets(report, out)
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def cmd_infer(args):
    det = pipeline.Detector.load(args.checkpoint)
    _post_override(det, args)
    seq_dir = Path(args.input)
    files = sorted(seq_dir.glob("*.pgm"))
    if not files:
        raise DataError(f"no .pgm frames in {seq_dir}")
    frames, names, skipped = [], [], 0
    for p in files:
        try:
            img = phantom.read_pgm(p)
            if img.shape != (det.image_h, det.image_w):
                raise DataError(f"size {img.shape} != {(det.image_h, det.image_w)}")
        except DataError as e:
            print(f"warning: skipping {p}: {e}", file=sys.stderr)
            skipped += 1
            continue
        frames.append(img)
        names.append(p.stem)
    gt = _sequence_annotations(args.annotations, seq_dir.name) if args.annotations else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for b in range(0, len(frames), 32):
        x = [stack_frames(frames, t, det.frame_mode) for t in range(b, min(b + 32, len(frames)))]
        for t, d in zip(range(b, b + len(x)), det.detect(np.stack(x))):
            rows.append((seq_dir.name, _frame_index(names[t]), d))
            if args.overlays:
                box = gt.get(_frame_index(names[t]))
                pipeline.write_ppm(out / f"{names[t]}.ppm", pipeline.overlay(frames[t], d, box))
    write_detections(out / "detections.csv", rows)
    print(out / "detections.csv")
    if skipped:
        print(f"warning: {skipped} unreadable frame(s) skipped", file=sys.stderr)
        return 2
    return 0


def _frame_index(stem):
    try:
        return int(stem)
    except ValueError:
        return stem


def _sequence_annotations(path, seq):
    out = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            if r["sequence_id"] == seq and r["present"] == "1":
                out[int(r["frame_index"])] = BoundingBox(
                    *(float(r[k]) for k in phantom.ANNOTATION_FIELDS[3:]))
    return out


def cmd_bench(args):
    if args.checkpoint:
        det = pipeline.Detector.load(args.checkpoint)
    else:
        det = pipeline.untrained_detector(args.size or 192, args.channel_scale)
    if args.size and args.size != det.image_h:
        raise ConfigError(f"--size {args.size} does not match checkpoint size {det.image_h}")
    report = pipeline.benchmark(det, iterations=args.iterations)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser():
    p = argparse.ArgumentParser(prog="weakdet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantom", help="generate a synthetic dataset")
    g.add_argument("--subjects", type=int, default=5)
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--size", type=int, default=192)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--absent-fraction", type=float, default=0.2)
    g.add_argument("--mm-per-pixel", type=float, default=0.1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_phantom)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="override output.dir")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--splits", help="splits.csv written by train")
    e.add_argument("--subset", default="test", choices=["train", "val", "test"])
    e.add_argument("--criterion", default="iou", choices=["iou", "distance"])
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--mm", type=float, default=2.5)
    e.add_argument("--logic", choices=["and", "or"])
    e.add_argument("--sigmoid-threshold", type=float)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect on one sequence directory of PGM frames")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--annotations", help="annotations.csv for ground-truth overlays")
    i.add_argument("--overlays", action="store_true", help="write PPM overlay images")
    i.add_argument("--logic", choices=["and", "or"])
    i.add_argument("--sigmoid-threshold", type=float)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="per-frame latency report")
    b.add_argument("--checkpoint")
    b.add_argument("--size", type=int, help="frame size (default 192, or the checkpoint's)")
    b.add_argument("--channel-scale", type=float, default=1.0)
    b.add_argument("--iterations", type=int, default=20)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except WeakDetError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
