"""Training, inference and benchmarking of the full four-stage detector."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .classifier import HIDDEN, PRESENT, ClassifierHead, classifier_loss
from .config import RunConfig
from .errors import CalibrationError, CheckpointError, DataError, NumericError
from .losses import LossWeights, class_weight, detection_loss
from .metrics import MatchCriterion, aggregate, evaluate, match_detections
from .optim import SgdState, sgd_step
from .postprocess import PostprocessConfig, calibrate_betas, detect
from .preprocess import augment, mixup_batch, rasterize_mask, stack_frames
from .tensor import sigmoid
from .unet import UNetLite, channel_widths

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "train_loss", "train_bce", "train_dice", "val_loss",
              "val_precision", "val_recall"]


def limit_threads(n):
    if threadpool_limits is None or n is None:
        return nullcontext()
    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------
# data

def stack_inputs(dataset, keys, frame_mode="three"):
    """(n, 3, h, w) float32 network inputs for ``keys``."""
    if not keys:
        return np.zeros((0, 3, dataset.image_h, dataset.image_w), dtype=np.float32)
    return np.stack([stack_frames(dataset.sequences[s], t, frame_mode) for s, t in keys])


def target_masks(dataset, keys):
    """(n, 1, h, w) box masks and (n,) presence labels."""
    h, w = dataset.image_h, dataset.image_w
    masks = np.zeros((len(keys), 1, h, w), dtype=np.float32)
    labels = np.zeros(len(keys), dtype=np.float32)
    for i, k in enumerate(keys):
        box = dataset.annotations[k]
        if box is not None:
            masks[i, 0] = rasterize_mask(box, h, w)
            labels[i] = 1.0
    return masks, labels


# --------------------------------------------------------------------------
# detector

@dataclass
class Detector:
    model: UNetLite
    head: ClassifierHead
    post: PostprocessConfig = field(default_factory=PostprocessConfig)
    frame_mode: str = "three"
    image_h: int = 192
    image_w: int = 192
    w_c: float = 1.0

    def predict(self, x, batch_size=32):
        """Eval-mode confidence masks (n, h, w) and present-probabilities (n,)."""
        confs, probs = [], []
        for b in range(0, len(x), batch_size):
            logits, bridge = self.model.forward(x[b:b + batch_size], "eval")
            confs.append(sigmoid(logits[:, 0]))
            probs.append(self.head.forward(bridge, "eval")[:, PRESENT])
        if not confs:
            return (np.zeros((0, self.image_h, self.image_w), np.float32), np.zeros(0, np.float32))
        return np.concatenate(confs), np.concatenate(probs)

    def detect(self, x, batch_size=32, post=None):
        post = post or self.post
        conf, prob = self.predict(x, batch_size)
        return [detect(c, post, p >= post.classifier_threshold) for c, p in zip(conf, prob)]

    # checkpoint ---------------------------------------------------------
    def tensors(self):
        return [(p.name, p.value) for p in
                self.model.params() + self.model.buffers() + self.head.params()]

    def scalars(self):
        return {
            "beta_x": self.post.beta_x,
            "beta_y": self.post.beta_y,
            "w_c": self.w_c,
            "sigmoid_threshold": self.post.sigmoid_threshold,
            "channel_scale": self.model.channel_scale,
            "dropout2d": self.model.dropout2d,
            "classifier_threshold": self.post.classifier_threshold,
            "min_box_px": self.post.min_box_px,
            "decision_and": 1.0 if self.post.decision_logic == "and" else 0.0,
            "three_frames": 1.0 if self.frame_mode == "three" else 0.0,
            "image_h": self.image_h,
            "image_w": self.image_w,
        }

    def save(self, path):
        checkpoint.save(path, self.tensors(), self.scalars())

    @classmethod
    def load(cls, path):
        tensors, sc = checkpoint.load(path)
        try:
            model = UNetLite(sc["channel_scale"], dropout2d=sc["dropout2d"])
            head = ClassifierHead(model.widths[4])
            post = PostprocessConfig(
                sigmoid_threshold=sc["sigmoid_threshold"], beta_x=sc["beta_x"],
                beta_y=sc["beta_y"], decision_logic="and" if sc["decision_and"] else "or",
                min_box_px=int(sc["min_box_px"]),
                classifier_threshold=sc["classifier_threshold"])
            det = cls(model, head, post, "three" if sc["three_frames"] else "single",
                      int(sc["image_h"]), int(sc["image_w"]), sc["w_c"])
        except KeyError as e:
            raise CheckpointError(f"{path}: missing scalar {e}") from e
        params = {p.name: p for p in model.params() + model.buffers() + head.params()}
        if set(params) != set(tensors):
            diff = sorted(set(params) ^ set(tensors))
            raise CheckpointError(f"{path}: tensor names do not match the architecture: {diff[:4]}")
        for name, arr in tensors.items():
            if params[name].value.shape != arr.shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, "
                                      f"expected {params[name].value.shape}")
            params[name].value = arr
            params[name].zero_grad()
        return det

    def check_dataset(self, dataset):
        if (dataset.image_h, dataset.image_w) != (self.image_h, self.image_w):
            raise DataError(f"dataset frames are {dataset.image_h}x{dataset.image_w} but the "
                            f"checkpoint expects {self.image_h}x{self.image_w}")


def detect_keys(detector, dataset, keys, batch_size=32, post=None):
    detector.check_dataset(dataset)
    out = {}
    for b in range(0, len(keys), 256):
        chunk = keys[b:b + 256]
        x = stack_inputs(dataset, chunk, detector.frame_mode)
        out.update(zip(chunk, detector.detect(x, batch_size, post)))
    return out


def evaluate_keys(detector, dataset, keys, criterion=None, post=None):
    """Run the full pipeline on ``keys`` and score it against the
    annotations; returns ``(report, labelings, detections)``."""
    criterion = criterion or MatchCriterion(mm_per_pixel=dataset.mm_per_pixel)
    dets = detect_keys(detector, dataset, keys, post=post)
    gt = {k: dataset.annotations[k] for k in keys}
    labs = match_detections(dets, gt, criterion)
    report = aggregate(labs, config={"criterion": asdict(criterion),
                                     "aggregation": "pooled over all evaluated frames"})
    return report, labs, dets


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    detector: Detector
    log_rows: list
    initial_loss: float
    final_loss: float
    best_epoch: int
    warnings: list = field(default_factory=list)


def _eval_loss(model, x, y, weights, batch_size=32):
    if len(x) == 0:
        return float("nan")
    total = 0.0
    for b in range(0, len(x), batch_size):
        logits, _ = model.forward(x[b:b + batch_size], "eval")
        v, _, _ = detection_loss(logits, y[b:b + batch_size], weights)
        total += v * len(logits)
    return total / len(x)


def _snapshot(model):
    return [p.value.copy() for p in model.params() + model.buffers()]


def _restore(model, snap):
    for p, v in zip(model.params() + model.buffers(), snap):
        p.value = v.copy()
        p.zero_grad()


def _mask_only_pr(model, x, gt_boxes, post, mmpp):
    """Validation precision/recall from the mask alone (classifier not yet
    trained), at the configured IoU default."""
    if len(x) == 0:
        return None, None
    dets = {}
    for b in range(0, len(x), 32):
        logits, _ = model.forward(x[b:b + 32], "eval")
        for i, c in enumerate(sigmoid(logits[:, 0])):
            dets[b + i] = detect(c, post, False)
    rep = evaluate(dets, dict(enumerate(gt_boxes)), MatchCriterion(mm_per_pixel=mmpp))
    return rep.precision, rep.recall


def train(cfg: RunConfig, dataset, train_keys, val_keys=(), out_dir=None, progress=None):
    """Backbone, then beta calibration, then the classifier on frozen
    features. Writes checkpoint and logs to ``out_dir`` when given."""
    if not train_keys:
        raise DataError("training set is empty")
    if (dataset.image_h, dataset.image_w) != (cfg.data.image_size, cfg.data.image_size):
        raise DataError(f"dataset frames are {dataset.image_h}x{dataset.image_w}, config "
                        f"image_size is {cfg.data.image_size}")
    train_keys, val_keys = list(train_keys), list(val_keys)
    seeds = np.random.SeedSequence(cfg.data.seed).spawn(6)
    init_seed = int(seeds[0].generate_state(1)[0])
    shuffle_rng, aug_rng, drop_rng, mix_rng, cls_rng = (np.random.default_rng(s) for s in seeds[1:])
    with limit_threads(cfg.train.threads):
        x_tr = stack_inputs(dataset, train_keys, cfg.data.frame_mode)
        y_tr, lab_tr = target_masks(dataset, train_keys)
        x_va = stack_inputs(dataset, val_keys, cfg.data.frame_mode)
        y_va, _ = target_masks(dataset, val_keys)
        gt_va = [dataset.annotations[k] for k in val_keys]
        w_c = cfg.loss.w_c if cfg.loss.w_c is not None else class_weight(y_tr)
        weights = LossWeights(cfg.loss.alpha_bce, cfg.loss.alpha_dice, w_c)
        model = UNetLite(cfg.model.channel_scale, dropout2d=cfg.model.dropout2d, seed=init_seed)
        head = ClassifierHead(model.widths[4], seed=init_seed + 1)
        post = copy.deepcopy(cfg.postprocess)
        state = SgdState(cfg.train.learning_rate, cfg.train.momentum, cfg.train.weight_decay)
        initial = _eval_loss(model, x_tr, y_tr, weights)
        rows, warnings = [], []
        best, best_score, best_epoch = _snapshot(model), None, 0
        bs = cfg.train.batch_size
        first_loss, over = None, 0
        for epoch in range(1, cfg.train.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(train_keys))
            sums = np.zeros(3)
            for b in range(0, len(order), bs):
                ids = order[b:b + bs]
                xs, ms = [], []
                for i in ids:
                    xa, ma = augment(x_tr[i], y_tr[i, 0], cfg.augment, aug_rng)
                    xs.append(xa)
                    ms.append(ma)
                xb = np.stack(xs).astype(np.float32)
                mb = np.stack(ms)[:, None].astype(np.float32)
                lb = (mb.reshape(len(ids), -1).sum(axis=1) > 0).astype(np.float32)
                if cfg.mixup.enabled:
                    xb, mb, lb = mixup_batch(xb, mb, lb, cfg.mixup, mix_rng)
                model.zero_grad()
                logits, _ = model.forward(xb, "train", drop_rng)
                value, grad, parts = detection_loss(logits, mb, weights)
                if not np.isfinite(value):
                    raise NumericError(f"non-finite training loss in epoch {epoch}")
                model.backward(grad)
                sgd_step(model.params(), state)
                sums += np.array([value, parts["bce"], parts["dice"]]) * len(ids)
            means = sums / len(order)
            if first_loss is None:
                first_loss = means[0]
            over = over + 1 if means[0] > 10 * first_loss else 0
            if over >= 5:
                raise NumericError(f"training diverged: loss above 10x its initial value "
                                   f"for 5 epochs (epoch {epoch})")
            val_loss = _eval_loss(model, x_va, y_va, weights)
            vp, vr = _mask_only_pr(model, x_va, gt_va, post, dataset.mm_per_pixel)
            rows.append([epoch, *means, val_loss, vp, vr])
            # highest validation recall, ties to lower validation loss; with
            # no validation frames the last epoch wins
            score = (vr or 0.0, -val_loss) if val_keys else (epoch,)
            if best_score is None or score > best_score:
                best, best_score, best_epoch = _snapshot(model), score, epoch
            if progress:
                progress(f"epoch {epoch}/{cfg.train.epochs} loss {means[0]:.4f} "
                         f"val_loss {val_loss:.4f} val_P {vp} val_R {vr} "
                         f"({time.perf_counter() - t0:.1f}s)")
        _restore(model, best)
        final = _eval_loss(model, x_tr, y_tr, weights)

        try:
            if not rows:
                raise CalibrationError("no training epochs, the mask carries no signal")
            conf_tr, _ = Detector(model, head, post).predict(x_tr)
            post.beta_x, post.beta_y = calibrate_betas(
                conf_tr, [dataset.annotations[k] for k in train_keys], post.sigmoid_threshold)
        except CalibrationError as e:
            warnings.append(f"beta calibration failed ({e}); keeping beta = "
                            f"({post.beta_x:.4f}, {post.beta_y:.4f})")
            log.warning(warnings[-1])

        train_classifier(model, head, x_tr, lab_tr, cfg, cls_rng)
        det = Detector(model, head, post, cfg.data.frame_mode, dataset.image_h,
                       dataset.image_w, w_c)
    result = TrainResult(det, rows, initial, final, best_epoch, warnings)
    if out_dir is not None:
        write_run(out_dir, result, cfg)
    return result


def bridge_features(model, x, batch_size=32):
    """Globally pooled bridge activations (n, c) in eval mode."""
    feats = [model.encode(x[b:b + batch_size], "eval").mean(axis=(2, 3))
             for b in range(0, len(x), batch_size)]
    return np.concatenate(feats) if feats else np.zeros((0, model.widths[4]), np.float32)


def train_classifier(model, head, x, labels, cfg, rng):
    """Fit the classifier head on frozen backbone features; the backbone's
    parameters are read but never written."""
    feats = bridge_features(model, x)
    state = SgdState(cfg.train.learning_rate, cfg.train.momentum, cfg.train.weight_decay)
    bs = cfg.train.batch_size
    losses = []
    for _ in range(cfg.train.classifier_epochs):
        order = rng.permutation(len(feats))
        total = 0.0
        for b in range(0, len(order), bs):
            ids = order[b:b + bs]
            head.zero_grad()
            probs = head.forward_features(feats[ids], "train", rng)
            value, dprobs = classifier_loss(probs, labels[ids])
            head.backward_features(dprobs)
            sgd_step(head.params(), state)
            total += value * len(ids)
        losses.append(total / len(order))
    return losses


def write_run(out_dir, result, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.detector.save(out / "checkpoint.wbx")
    with open(out / "train_log.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(LOG_FIELDS)
        for row in result.log_rows:
            wr.writerow([row[0]] + [_num(v) for v in row[1:]])
    summary = {
        "initial_train_loss": result.initial_loss,
        "final_train_loss": result.final_loss,
        "best_epoch": result.best_epoch,
        "beta_x": result.detector.post.beta_x,
        "beta_y": result.detector.post.beta_y,
        "w_c": result.detector.w_c,
        "warnings": result.warnings,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.save(out / "config.ini")


def _num(v):
    if v is None:
        return "undefined"
    return f"{float(v):.8g}"


# --------------------------------------------------------------------------
# inference helpers

PRED_COLOR = (255, 255, 0)
GT_COLOR = (0, 255, 0)


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def draw_box(rgb, box, color):
    """Burn a one-pixel box outline into ``rgb`` in place."""
    h, w, _ = rgb.shape
    x0 = int(np.clip(np.floor(box.x_min), 0, w - 1))
    x1 = int(np.clip(np.ceil(box.x_max) - 1, 0, w - 1))
    y0 = int(np.clip(np.floor(box.y_min), 0, h - 1))
    y1 = int(np.clip(np.ceil(box.y_max) - 1, 0, h - 1))
    rgb[y0, x0:x1 + 1] = color
    rgb[y1, x0:x1 + 1] = color
    rgb[y0:y1 + 1, x0] = color
    rgb[y0:y1 + 1, x1] = color
    return rgb


def overlay(frame, det=None, gt=None):
    rgb = np.repeat(np.asarray(frame, dtype=np.uint8)[..., None], 3, axis=2)
    if gt is not None:
        draw_box(rgb, gt, GT_COLOR)
    if det is not None and det.present:
        draw_box(rgb, det.box, PRED_COLOR)
    return rgb


# --------------------------------------------------------------------------
# benchmark

def untrained_detector(size=192, channel_scale=1.0, seed=0):
    """Freshly initialized detector, for timing without a checkpoint."""
    model = UNetLite(channel_scale, seed=seed)
    return Detector(model, ClassifierHead(model.widths[4], seed=seed + 1),
                    image_h=size, image_w=size)


def unet_flops(channel_scale, h, w, in_channels=3):
    """Multiply-add count x2 of one forward pass (backbone + classifier)."""
    wd = channel_widths(channel_scale)
    flops = 0
    cin, hh, ww = in_channels, h, w
    for lvl in range(4):
        flops += 2 * hh * ww * 9 * (cin * wd[lvl] + wd[lvl] * wd[lvl])
        cin, hh, ww = wd[lvl], hh // 2, ww // 2
    flops += 2 * hh * ww * 9 * (cin * wd[4] + wd[4] * wd[4])
    for lvl in reversed(range(4)):
        hh, ww = hh * 2, ww * 2
        flops += 2 * (hh // 2) * (ww // 2) * wd[lvl + 1] * wd[lvl] * 4
        flops += 2 * hh * ww * 9 * (2 * wd[lvl] * wd[lvl] + wd[lvl] * wd[lvl])
    flops += 2 * h * w * wd[0]
    flops += 2 * (wd[4] * HIDDEN + HIDDEN * 2)
    return int(flops)


def benchmark(detector, iterations=20, threads=(1, None), seed=0):
    """Per-frame wall time of the full pipeline (stack already done,
    forward + classify + postprocess)."""
    rng = np.random.default_rng(seed)
    x = rng.random((1, 3, detector.image_h, detector.image_w), dtype=np.float32)
    detector.detect(x)  # warm-up
    report = {"image_h": detector.image_h, "image_w": detector.image_w,
              "channel_scale": detector.model.channel_scale, "iterations": iterations,
              "flops": unet_flops(detector.model.channel_scale, detector.image_h,
                                  detector.image_w)}
    for n in threads:
        times = []
        with limit_threads(n):
            for _ in range(iterations):
                t0 = time.perf_counter()
                detector.detect(x)
                times.append((time.perf_counter() - t0) * 1e3)
        t = np.array(times)
        key = "single_thread" if n == 1 else "multi_thread"
        report[key] = {"threads": n or "all", "mean_ms": float(t.mean()),
                       "p50_ms": float(np.percentile(t, 50)),
                       "p95_ms": float(np.percentile(t, 95))}
    return report
