"""Localization precision/recall, ablation tables and offset exports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

WITHIN_MM = 1.5


@dataclass
class MatchCriterion:
    kind: str = "iou"
    iou_threshold: float = 0.5
    distance_mm: float = 2.5
    mm_per_pixel: float | None = None

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("iou", "distance"):
            raise ConfigError(f"criterion kind must be 'iou' or 'distance', got {self.kind!r}")
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError("iou_threshold must be in (0, 1]")
        if not self.distance_mm > 0:
            raise ConfigError("distance_mm must be > 0")
        if self.mm_per_pixel is not None and not self.mm_per_pixel > 0:
            raise ConfigError("mm_per_pixel must be > 0")


def iou(a, b):
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return float(inter / (a.area + b.area - inter))


@dataclass
class FrameLabel:
    key: tuple
    tp: int = 0
    fp: int = 0
    fn: int = 0
    offset_mm: tuple | None = None
    iou: float | None = None
    distance_mm: float | None = None


def match_detections(detections, ground_truth, criterion):
    """Label every ground-truth frame as TP / FP / FN.

    ``detections`` maps frame key -> Detection (missing keys count as no
    detection); ``ground_truth`` maps frame key -> BoundingBox or None.
    A present detection that misses the criterion on a present frame is
    both a false positive and a false negative.
    """
    mmpp = criterion.mm_per_pixel
    if criterion.kind == "distance" and mmpp is None:
        raise ConfigError("distance criterion needs mm_per_pixel")
    labels = []
    for key, gt in ground_truth.items():
        det = detections.get(key)
        lab = FrameLabel(key)
        present = det is not None and det.present
        if gt is None:
            lab.fp = int(present)
        elif not present:
            lab.fn = 1
        else:
            gx, gy = gt.center
            dx, dy = det.center[0] - gx, det.center[1] - gy
            lab.iou = iou(det.box, gt)
            if mmpp is not None:
                lab.distance_mm = math.hypot(dx, dy) * mmpp
            if criterion.kind == "iou":
                ok = lab.iou >= criterion.iou_threshold
            else:
                ok = lab.distance_mm <= criterion.distance_mm
            if ok:
                lab.tp = 1
                scale = mmpp if mmpp is not None else 1.0
                lab.offset_mm = (dx * scale, dy * scale)
            else:
                lab.fp = lab.fn = 1
        labels.append(lab)
    return labels


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    offsets_mm: list = field(default_factory=list)
    frac_within_1_5mm: float | None = None
    n_frames: int = 0
    config: dict = field(default_factory=dict)

    def summary(self):
        d = asdict(self)
        d.pop("offsets_mm")
        return d

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def aggregate(labelings, config=None):
    labelings = list(labelings)
    if not labelings:
        raise ValueError("aggregate needs at least one labeled frame")
    tp = sum(l.tp for l in labelings)
    fp = sum(l.fp for l in labelings)
    fn = sum(l.fn for l in labelings)
    # sort for permutation invariance of the offset list
    offsets = sorted(l.offset_mm for l in labelings if l.offset_mm is not None)
    within = None
    if offsets:
        o = np.abs(np.array(offsets))
        within = float(np.mean((o[:, 0] <= WITHIN_MM) & (o[:, 1] <= WITHIN_MM)))
    return EvalReport(
        tp=tp, fp=fp, fn=fn,
        precision=tp / (tp + fp) if tp + fp else None,
        recall=tp / (tp + fn) if tp + fn else None,
        offsets_mm=offsets, frac_within_1_5mm=within, n_frames=len(labelings),
        config=dict(config or {}))


def evaluate(detections, ground_truth, criterion):
    return aggregate(match_detections(detections, ground_truth, criterion),
                     config={"criterion": asdict(criterion),
                             "aggregation": "pooled over all evaluated frames"})


def threshold_sweep(detections, ground_truth, thresholds, mm_per_pixel=None):
    """Precision/recall at each IoU threshold (an extra beyond the fixed
    operating point)."""
    return [(t, evaluate(detections, ground_truth,
                         MatchCriterion("iou", iou_threshold=t, mm_per_pixel=mm_per_pixel)))
            for t in thresholds]


# --------------------------------------------------------------------------
# reports on disk

def write_labels_csv(path, labelings):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["sequence_id", "frame_index", "tp", "fp", "fn", "iou",
                     "distance_mm", "dx_mm", "dy_mm"])
        for l in labelings:
            dx, dy = l.offset_mm if l.offset_mm else ("", "")
            wr.writerow([l.key[0], l.key[1], l.tp, l.fp, l.fn,
                         "" if l.iou is None else f"{l.iou:.6f}",
                         "" if l.distance_mm is None else f"{l.distance_mm:.6f}",
                         dx if dx == "" else f"{dx:.6f}", dy if dy == "" else f"{dy:.6f}"])


def write_report(out_dir, report, labelings=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    with open(out / "report.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["tp", "fp", "fn", "precision", "recall", "frac_within_1_5mm", "n_frames"])
        wr.writerow([report.tp, report.fp, report.fn, _fmt(report.precision),
                     _fmt(report.recall), _fmt(report.frac_within_1_5mm), report.n_frames])
    if labelings is not None:
        write_labels_csv(out / "frames.csv", labelings)


def _fmt(v):
    return "undefined" if v is None else f"{v:.6f}"


# --------------------------------------------------------------------------
# ablations

def ablation_run(conditions, run, out_csv=None):
    """Train and evaluate once per condition.

    ``conditions`` is a list of ``(name, train_keys, test_keys)``; ``run``
    is called as ``run(train_keys, test_keys)`` and must return an
    :class:`EvalReport`. Rows are ``(name, n_train, precision, recall)``.
    """
    rows = []
    for name, train, test in conditions:
        if not train:
            raise ConfigError(f"ablation condition {name!r} has an empty training set")
        rep = run(train, test)
        rows.append((name, len(train), rep.precision, rep.recall))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["condition", "n_train", "precision", "recall"])
            for name, n, p, r in rows:
                wr.writerow([name, n, _fmt(p), _fmt(r)])
    return rows


def subset_conditions(train_keys, test_keys, fractions, seed=0):
    from .phantom import subset
    return [(f"subset_{int(round(100 * f))}pct", subset(train_keys, f, seed), test_keys)
            for f in fractions]


def subject_fold_conditions(dataset):
    from .phantom import leave_one_subject_out
    return [(f"holdout_{held}", train, test)
            for train, test, held in leave_one_subject_out(dataset)]


# --------------------------------------------------------------------------
# offset heatmap / histograms

def offset_histograms(offsets_mm, bin_mm=0.25):
    """2-D counts over (lateral, axial) offsets with bins centered on 0.

    Returns ``(counts, edges, lateral, axial, overflow)``; the edges always
    cover the largest offset so ``overflow`` is 0 by construction.
    """
    o = np.asarray(offsets_mm, dtype=np.float64).reshape(-1, 2)
    if len(o) == 0:
        raise DataError("no true-positive offsets to export")
    m = int(math.ceil(np.abs(o).max() / bin_mm + 0.5)) + 1
    edges = (np.arange(-m, m + 2) - 0.5) * bin_mm
    counts, _, _ = np.histogram2d(o[:, 0], o[:, 1], bins=[edges, edges])
    counts = counts.astype(np.int64)
    overflow = len(o) - int(counts.sum())
    return counts, edges, counts.sum(axis=1), counts.sum(axis=0), overflow


def export_offsets(report, out_dir, bin_mm=0.25):
    """Write heatmap (CSV + PGM) and lateral/axial histogram CSVs."""
    from .phantom import write_pgm
    counts, edges, lat, ax, overflow = offset_histograms(report.offsets_mm, bin_mm)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    centers = (edges[:-1] + edges[1:]) / 2
    with open(out / "offset_heatmap.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["lateral_mm", "axial_mm", "count"])
        for i, cx in enumerate(centers):
            for j, cy in enumerate(centers):
                wr.writerow([f"{cx:.4f}", f"{cy:.4f}", counts[i, j]])
    for name, marg in (("lateral", lat), ("axial", ax)):
        with open(out / f"offset_hist_{name}.csv", "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["bin_lo_mm", "bin_hi_mm", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], marg):
                wr.writerow([f"{lo:.4f}", f"{hi:.4f}", c])
    # rows = axial (y), columns = lateral (x); brightest bin = 255
    img = counts.T.astype(np.float64)
    img = np.rint(255 * img / img.max()).astype(np.uint8)
    scale = max(1, 256 // img.shape[0])
    write_pgm(out / "offset_heatmap.pgm", np.kron(img, np.ones((scale, scale), dtype=np.uint8)))
    return {"counts": counts, "edges": edges, "lateral": lat, "axial": ax, "overflow": overflow}
