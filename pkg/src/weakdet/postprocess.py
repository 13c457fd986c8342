"""Mask-to-box recovery: confidence-weighted center, weighted spread, scaled
box, and the final presence decision.

Coordinates follow numpy image indexing: ``x`` is the column, ``y`` the row.
The moment functions work in pixel-index coordinates (pixel ``k`` sits at
``k``); :func:`detect` shifts the center by half a pixel into continuous
image coordinates, where pixel ``k`` covers ``[k, k + 1)`` and boxes are
half-open intervals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import AnnotationError, CalibrationError, ConfigError, DataError

DETECTION_FIELDS = ["sequence_id", "frame_index", "present", "x_c", "y_c",
                    "width", "height", "mean_confidence"]


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise AnnotationError(f"degenerate box {self}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def clip(self, h, w):
        return BoundingBox(max(self.x_min, 0), max(self.y_min, 0),
                           min(self.x_max, w), min(self.y_max, h))


@dataclass
class PostprocessConfig:
    sigmoid_threshold: float = 0.5
    # a uniform box of width W has weighted spread W / sqrt(12)
    beta_x: float = float(np.sqrt(12))
    beta_y: float = float(np.sqrt(12))
    decision_logic: str = "or"
    min_box_px: int = 2
    classifier_threshold: float = 0.5

    def __post_init__(self):
        self.decision_logic = self.decision_logic.lower()
        if not 0 < self.sigmoid_threshold < 1:
            raise ConfigError("sigmoid_threshold must be in (0, 1)")
        if not (self.beta_x > 0 and self.beta_y > 0):
            raise ConfigError("beta_x and beta_y must be positive")
        if self.decision_logic not in ("and", "or"):
            raise ConfigError(f"decision_logic must be 'and' or 'or', got {self.decision_logic!r}")
        if self.min_box_px < 1:
            raise ConfigError("min_box_px must be >= 1")
        if not 0 < self.classifier_threshold < 1:
            raise ConfigError("classifier_threshold must be in (0, 1)")


@dataclass
class Detection:
    present: bool
    center: tuple | None = None
    box: BoundingBox | None = None
    size: tuple | None = None          # unclipped (width, height)
    mean_confidence: float = 0.0
    k: int = 0
    mask_present: bool = False
    classifier_present: bool = False
    extra: dict = field(default_factory=dict)


def _support(conf, threshold):
    conf = np.asarray(conf, dtype=np.float64)
    ys, xs = np.nonzero(conf >= threshold)
    return xs, ys, conf[ys, xs]


def weighted_center(conf, threshold=0.5):
    """Confidence-weighted mean location of the pixels at or above
    ``threshold``; ``None`` if there are none."""
    xs, ys, wts = _support(conf, threshold)
    if xs.size == 0:
        return None
    total = wts.sum()
    return float((wts * xs).sum() / total), float((wts * ys).sum() / total)


def weighted_std(conf, threshold, center):
    """Weighted spread of the supra-threshold locations with the (K-1)/K
    correction in the denominator. K == 1 gives (0, 0)."""
    xs, ys, wts = _support(conf, threshold)
    k = xs.size
    if k == 0:
        raise ValueError("weighted_std needs at least one pixel above threshold")
    if k == 1:
        return 0.0, 0.0
    xc, yc = center
    denom = (k - 1) / k * wts.sum()
    sx = np.sqrt((wts * (xs - xc) ** 2).sum() / denom)
    sy = np.sqrt((wts * (ys - yc) ** 2).sum() / denom)
    return float(sx), float(sy)


def box_size(sigmas, config):
    sx, sy = sigmas
    return (max(config.beta_x * sx, config.min_box_px),
            max(config.beta_y * sy, config.min_box_px))


def box_from_moments(center, sigmas, config, shape=None):
    """Box of size ``beta * sigma`` (floored at ``min_box_px``) centered at
    ``center``, clipped to ``shape`` = (h, w) when given."""
    width, height = box_size(sigmas, config)
    return _box_around(center, width, height, shape)


def _box_around(center, width, height, shape):
    xc, yc = center
    box = BoundingBox(xc - width / 2, yc - height / 2, xc + width / 2, yc + height / 2)
    if shape is not None:
        box = box.clip(*shape)
    return box


def fit_betas(sigmas, extents):
    """Least-squares scale through the origin: beta = sum(e*s) / sum(s^2).

    ``sigmas`` and ``extents`` are (m, 2) arrays of (x, y) pairs.
    """
    s = np.asarray(sigmas, dtype=np.float64).reshape(-1, 2)
    e = np.asarray(extents, dtype=np.float64).reshape(-1, 2)
    if len(s) == 0:
        raise CalibrationError("no qualifying frames for beta calibration")
    ss = (s * s).sum(axis=0)
    if not (ss > 0).all():
        raise CalibrationError("all weighted spreads are zero; cannot calibrate")
    betas = (e * s).sum(axis=0) / ss
    if not (betas > 0).all():
        raise CalibrationError(f"calibrated betas not positive: {betas}")
    return float(betas[0]), float(betas[1])


def calibrate_betas(conf_masks, boxes, threshold=0.5):
    """Fit (beta_x, beta_y) from backbone confidence masks and their
    ground-truth boxes. Frames without a box or with fewer than two
    supra-threshold pixels are skipped."""
    sig, ext = [], []
    for conf, box in zip(conf_masks, boxes):
        if box is None:
            continue
        c = weighted_center(conf, threshold)
        if c is None:
            continue
        if np.count_nonzero(np.asarray(conf) >= threshold) < 2:
            continue
        sig.append(weighted_std(conf, threshold, c))
        ext.append((box.width, box.height))
    return fit_betas(sig, ext)


def decide(mask_present, classifier_present, logic="or"):
    logic = logic.lower()
    if logic == "or":
        return bool(mask_present) or bool(classifier_present)
    if logic == "and":
        return bool(mask_present) and bool(classifier_present)
    raise ConfigError(f"unknown decision logic {logic!r}")


def detect(conf, config, classifier_present=False):
    """Turn one confidence mask (h, w) into a :class:`Detection`."""
    conf = np.asarray(conf)
    h, w = conf.shape
    thr = config.sigmoid_threshold
    c = weighted_center(conf, thr)
    k = 0 if c is None else int(np.count_nonzero(conf >= thr))
    mask_present = k >= 1
    present = decide(mask_present, classifier_present, config.decision_logic)
    det = Detection(present=False, k=k, mask_present=mask_present,
                    classifier_present=bool(classifier_present))
    if not present:
        return det
    if c is None:
        # classifier alone says present but the mask is empty: fall back to
        # the highest-confidence pixel so a location can still be reported
        yy, xx = np.unravel_index(int(np.argmax(conf)), conf.shape)
        c, sig = (float(xx), float(yy)), (0.0, 0.0)
        det.mean_confidence = float(conf[yy, xx])
    else:
        sig = weighted_std(conf, thr, c)
        det.mean_confidence = float(conf[conf >= thr].mean())
    center = (c[0] + 0.5, c[1] + 0.5)
    det.present = True
    det.center = center
    det.size = box_size(sig, config)
    det.box = _box_around(center, *det.size, (h, w))
    det.extra["sigma"] = sig
    return det


# --------------------------------------------------------------------------
# CSV

def write_detections(path, rows):
    """``rows`` is an iterable of ``(sequence_id, frame_index, Detection)``."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(DETECTION_FIELDS)
        for seq, idx, det in rows:
            if det.present:
                wr.writerow([seq, idx, 1, f"{det.center[0]:.4f}", f"{det.center[1]:.4f}",
                             f"{det.size[0]:.4f}", f"{det.size[1]:.4f}",
                             f"{det.mean_confidence:.6f}"])
            else:
                wr.writerow([seq, idx, 0, "", "", "", "", ""])


def read_detections(path, shape=None):
    """Inverse of :func:`write_detections`; returns ``{(seq, idx): Detection}``.

    Boxes are rebuilt from center and size and clipped to ``shape``."""
    out = {}
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != DETECTION_FIELDS:
            raise DataError(f"{path}: unexpected header {rd.fieldnames}")
        for line, row in enumerate(rd, start=2):
            try:
                key = (row["sequence_id"], int(row["frame_index"]))
                if row["present"] == "1":
                    center = (float(row["x_c"]), float(row["y_c"]))
                    size = (float(row["width"]), float(row["height"]))
                    det = Detection(True, center, _box_around(center, *size, shape), size,
                                    float(row["mean_confidence"]))
                elif row["present"] == "0":
                    det = Detection(False)
                else:
                    raise ValueError(f"present must be 0 or 1, got {row['present']!r}")
            except (ValueError, TypeError) as e:
                raise DataError(f"{path}:{line}: malformed detection row ({e})") from e
            out[key] = det
    return out
