"""Synthetic ultrasound-like scan sequences and the on-disk dataset format.

Layout of a dataset root::

    manifest.txt                 key = value lines
    annotations.csv              one row per frame
    <sequence_id>/000000.pgm     binary PGM (P5), maxval 255

Layout decisions (anatomy, distractor placement, motion, absent runs) are
drawn with integer RNG calls only; float rendering is quantized to 8 bits
before writing, so a seed reproduces the same bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (ConfigError, DataError, MalformedRecordError, MissingFileError,
                     OutOfBoundsError)
from .postprocess import BoundingBox

FORMAT_VERSION = 1
ANNOTATION_FIELDS = ["sequence_id", "frame_index", "present", "x_min", "y_min", "x_max", "y_max"]
_RES = 1 << 20


# --------------------------------------------------------------------------
# PGM

def write_pgm(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise DataError(f"PGM frames must be 2-D uint8, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path):
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise MissingFileError(f"missing frame file {path}") from e
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DataError(f"{path}: bad PGM header") from e
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos) \
        if len(data) - pos >= h * w else None
    if pixels is None:
        raise DataError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()


# --------------------------------------------------------------------------
# generation

@dataclass
class PhantomConfig:
    n_subjects: int = 5
    frames_per_subject: int = 200
    image_h: int = 192
    image_w: int = 192
    target_radius_range: tuple | None = None     # px; default scales with image size
    target_eccentricity_range: tuple = (0.0, 0.6)
    speckle_grain_px: float = 1.0
    distractor_count_range: tuple = (1, 3)
    motion_amplitude_px: float = 1.5
    absent_fraction: float = 0.2
    mm_per_pixel: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.image_h % 16 or self.image_w % 16 or self.image_h <= 0 or self.image_w <= 0:
            raise ConfigError(f"image dims must be positive multiples of 16, got "
                              f"{self.image_h}x{self.image_w}")
        if self.n_subjects < 1 or self.frames_per_subject < 1:
            raise ConfigError("n_subjects and frames_per_subject must be >= 1")
        if not 0 <= self.absent_fraction < 1:
            raise ConfigError("absent_fraction must be in [0, 1)")
        if not self.mm_per_pixel > 0:
            raise ConfigError("mm_per_pixel must be > 0")
        if not self.motion_amplitude_px >= 1:
            raise ConfigError("motion_amplitude_px must be >= 1")
        if self.target_radius_range is None:
            s = min(self.image_h, self.image_w)
            self.target_radius_range = (0.10 * s, 0.16 * s)
        lo, hi = self.target_radius_range
        if not 2 <= lo <= hi < min(self.image_h, self.image_w) / 4:
            raise ConfigError(f"target_radius_range {self.target_radius_range} out of range")
        e0, e1 = self.target_eccentricity_range
        if not 0 <= e0 <= e1 < 1:
            raise ConfigError("target_eccentricity_range must lie in [0, 1)")
        d0, d1 = self.distractor_count_range
        if not 0 <= d0 <= d1:
            raise ConfigError("distractor_count_range must be 0 <= lo <= hi")


def sequence_id(i):
    return f"subject_{i:02d}"


def _u(rng, lo, hi):
    """Uniform value on [lo, hi) from an integer draw."""
    return lo + (hi - lo) * int(rng.integers(0, _RES)) / _RES


@dataclass
class _Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def rho(self, xx, yy):
        """Normalized elliptical radius at pixel centers (1 on the boundary)."""
        dx = xx + 0.5 - self.cx
        dy = yy + 0.5 - self.cy
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return np.sqrt((u / self.a) ** 2 + (v / self.b) ** 2)

    def half_extent(self):
        c, s = np.cos(self.theta), np.sin(self.theta)
        return (np.sqrt((self.a * c) ** 2 + (self.b * s) ** 2),
                np.sqrt((self.a * s) ** 2 + (self.b * c) ** 2))

    def moved(self, dx, dy):
        return _Ellipse(self.cx + dx, self.cy + dy, self.a, self.b, self.theta)


@dataclass
class _Subject:
    target: _Ellipse
    fascicles: list
    ring_level: float
    distractors: list
    background: np.ndarray
    steps: list
    absent: np.ndarray


def _allowed_steps(amp):
    r = int(np.floor(amp))
    return [(dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)
            if dx * dx + dy * dy <= amp * amp]


def _layout(cfg, rng):
    h, w = cfg.image_h, cfg.image_w
    r = _u(rng, *cfg.target_radius_range)
    ecc = _u(rng, *cfg.target_eccentricity_range)
    a, b = r, r * np.sqrt(1 - ecc ** 2)
    theta = _u(rng, 0, np.pi)
    margin = r + 2
    # integer-plus-half centers keep boxes translating by whole pixels
    cx = int(rng.integers(int(np.ceil(margin)), int(w - margin))) + 0.5
    cy = int(rng.integers(int(np.ceil(margin)), int(h - margin))) + 0.5
    target = _Ellipse(cx, cy, a, b, theta)
    fascicles = []
    for _ in range(int(rng.integers(5, 10))):
        rr = _u(rng, 0, 0.6)
        ang = _u(rng, 0, 2 * np.pi)
        fascicles.append((rr * np.cos(ang), rr * np.sin(ang), _u(rng, 0.10, 0.18)))
    distractors = []
    n_d = int(rng.integers(cfg.distractor_count_range[0], cfg.distractor_count_range[1] + 1))
    tries = 0
    while len(distractors) < n_d and tries < 200:
        tries += 1
        rd = _u(rng, 0.8 * r, 1.6 * r)
        ex = _u(rng, 0.0, 0.5)
        x = int(rng.integers(0, w)) + 0.5
        y = int(rng.integers(0, h)) + 0.5
        if np.hypot(x - cx, y - cy) < r + rd + 4:
            continue
        distractors.append(_Ellipse(x, y, rd, rd * np.sqrt(1 - ex ** 2), _u(rng, 0, np.pi)))
    # smooth per-subject echogenicity field
    coarse = rng.integers(0, 256, size=(h // 16 + 1, w // 16 + 1)).astype(np.float64) / 255
    background = 0.30 + 0.25 * ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]),
                                            order=1)[:h, :w]
    # motion: persistent integer steps, reflected at the margins
    allowed = _allowed_steps(cfg.motion_amplitude_px)
    steps = []
    step = allowed[int(rng.integers(len(allowed)))]
    x, y = cx, cy
    hx, hy = target.half_extent()
    for _ in range(cfg.frames_per_subject):
        if int(rng.integers(0, 10)) == 0:
            step = allowed[int(rng.integers(len(allowed)))]
        dx, dy = step
        if not (hx + 1 <= x + dx <= w - hx - 1):
            dx = -dx
        if not (hy + 1 <= y + dy <= h - hy - 1):
            dy = -dy
        step = (dx, dy)
        x, y = x + dx, y + dy
        steps.append((dx, dy))
    absent = np.zeros(cfg.frames_per_subject, dtype=bool)
    n_abs = int(round(cfg.absent_fraction * cfg.frames_per_subject))
    if n_abs:
        runs = int(rng.integers(1, 4))
        sizes = [n_abs // runs + (1 if i < n_abs % runs else 0) for i in range(runs)]
        for s in sizes:
            if s == 0:
                continue
            for _ in range(50):
                start = int(rng.integers(0, cfg.frames_per_subject - s + 1))
                if not absent[max(0, start - 1):start + s + 1].any():
                    break
            absent[start:start + s] = True
    return _Subject(target, fascicles, _u(rng, 0.75, 0.95), distractors, background,
                    steps, absent)


def _render(cfg, subj, target, offset, present, rng):
    h, w = cfg.image_h, cfg.image_w
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = subj.background.copy()
    for d in subj.distractors:
        rho = d.moved(*offset).rho(xx, yy)
        inside = np.clip((1.15 - rho) / 0.15, 0, 1)
        img = img * (1 - inside) + 0.06 * inside
    if present:
        rho = target.rho(xx, yy)
        inside = rho <= 1.0
        ring = inside & (rho >= 0.72)
        interior = inside & ~ring
        c, s = np.cos(target.theta), np.sin(target.theta)
        tex = np.zeros((h, w))
        for fu, fv, fr in subj.fascicles:
            u, v = fu * target.a, fv * target.b
            fx = target.cx + c * u - s * v
            fy = target.cy + s * u + c * v
            rad = fr * target.a
            tex = np.maximum(tex, np.exp(-((xx + 0.5 - fx) ** 2 + (yy + 0.5 - fy) ** 2)
                                         / (2 * rad ** 2)))
        img = np.where(interior, 0.12 + 0.45 * tex, img)
        img = np.where(ring, subj.ring_level, img)
    noise = rng.exponential(1.0, size=(h, w))
    speckle = ndimage.gaussian_filter(noise, cfg.speckle_grain_px, mode="reflect")
    speckle /= speckle.mean()
    img = ndimage.gaussian_filter(img * speckle, 0.6, mode="reflect")
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _tight_box(target, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    ys, xs = np.nonzero(target.rho(xx, yy) <= 1.0)
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def generate(config, root):
    """Render the dataset under ``root`` and return its manifest path plus
    the analytic target ellipse of every present frame (for checks)."""
    cfg = config
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {root}: {e}") from e
    master = np.random.SeedSequence(cfg.seed)
    children = master.spawn(cfg.n_subjects)
    rows = []
    ellipses = {}
    counts = {}
    for i, child in enumerate(children):
        seq = sequence_id(i)
        layout_rng, render_rng = (np.random.default_rng(s) for s in child.spawn(2))
        subj = _layout(cfg, layout_rng)
        (root / seq).mkdir(exist_ok=True)
        ox = oy = 0
        for t in range(cfg.frames_per_subject):
            dx, dy = subj.steps[t]
            ox, oy = ox + dx, oy + dy
            target = subj.target.moved(ox, oy)
            present = not subj.absent[t]
            img = _render(cfg, subj, target, (ox, oy), present, render_rng)
            write_pgm(root / seq / f"{t:06d}.pgm", img)
            if present:
                box = _tight_box(target, cfg.image_h, cfg.image_w)
                rows.append([seq, t, 1, box.x_min, box.y_min, box.x_max, box.y_max])
                ellipses[(seq, t)] = (target.cx, target.cy, target.a, target.b, target.theta)
            else:
                rows.append([seq, t, 0, "", "", "", ""])
        counts[seq] = cfg.frames_per_subject
    with open(root / "annotations.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(ANNOTATION_FIELDS)
        wr.writerows(rows)
    manifest = root / "manifest.txt"
    lines = [f"format_version = {FORMAT_VERSION}",
             f"mm_per_pixel = {cfg.mm_per_pixel!r}",
             f"image_h = {cfg.image_h}",
             f"image_w = {cfg.image_w}",
             "annotations = annotations.csv"]
    lines += [f"sequence.{seq} = {n}" for seq, n in counts.items()]
    manifest.write_text("\n".join(lines) + "\n")
    return manifest, ellipses


# --------------------------------------------------------------------------
# loading

@dataclass
class Dataset:
    root: Path
    mm_per_pixel: float
    image_h: int
    image_w: int
    sequences: dict            # sequence_id -> list of uint8 frames
    annotations: dict          # (sequence_id, frame_index) -> BoundingBox | None
    format_version: int = FORMAT_VERSION

    def keys(self):
        return [(s, t) for s, frames in self.sequences.items() for t in range(len(frames))]

    @property
    def subjects(self):
        return list(self.sequences)


def _read_manifest(path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError as e:
        raise MissingFileError(f"missing manifest {path}") from e
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedRecordError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load(manifest_path):
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.txt"
    root = manifest_path.parent
    meta = _read_manifest(manifest_path)
    try:
        version = int(meta["format_version"])
        mmpp = float(meta["mm_per_pixel"])
        h, w = int(meta["image_h"]), int(meta["image_w"])
        ann_name = meta["annotations"]
        counts = {k[len("sequence."):]: int(v) for k, v in meta.items()
                  if k.startswith("sequence.")}
    except (KeyError, ValueError) as e:
        raise MalformedRecordError(f"{manifest_path}: bad or missing field ({e})") from e
    if version != FORMAT_VERSION:
        raise DataError(f"{manifest_path}: unsupported format version {version}")
    sequences = {}
    for seq, n in counts.items():
        frames = []
        for t in range(n):
            img = read_pgm(root / seq / f"{t:06d}.pgm")
            if img.shape != (h, w):
                raise DataError(f"{root / seq / f'{t:06d}.pgm'}: size {img.shape} != {(h, w)}")
            frames.append(img)
        sequences[seq] = frames
    annotations = {}
    ann_path = root / ann_name
    if not ann_path.exists():
        raise MissingFileError(f"missing annotation file {ann_path}")
    with open(ann_path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != ANNOTATION_FIELDS:
            raise MalformedRecordError(f"{ann_path}: unexpected header {rd.fieldnames}")
        for line, row in enumerate(rd, start=2):
            where = f"{ann_path}:{line}"
            try:
                key = (row["sequence_id"], int(row["frame_index"]))
                present = int(row["present"])
                if present == 1:
                    box = BoundingBox(*(float(row[k]) for k in ANNOTATION_FIELDS[3:]))
                elif present == 0:
                    box = None
                else:
                    raise ValueError(f"present must be 0 or 1, got {present}")
            except (ValueError, TypeError) as e:
                raise MalformedRecordError(f"{where}: malformed row ({e})") from e
            if key[0] not in sequences or not 0 <= key[1] < len(sequences[key[0]]):
                raise MalformedRecordError(f"{where}: no frame {key} in manifest")
            if box is not None and (box.x_min < 0 or box.y_min < 0
                                    or box.x_max > w or box.y_max > h):
                raise OutOfBoundsError(f"{where}: box {box} outside {w}x{h} image")
            annotations[key] = box
    missing = [k for s, fr in sequences.items() for k in [(s, t) for t in range(len(fr))]
               if k not in annotations]
    if missing:
        raise MalformedRecordError(f"{ann_path}: no annotation for frames {missing[:3]}...")
    return Dataset(root, mmpp, h, w, sequences, annotations, version)


# --------------------------------------------------------------------------
# splits

def random_split(keys, ratios=(64, 16, 20), seed=0):
    """Shuffle ``keys`` and cut into train/val/test by ``ratios``."""
    keys = list(keys)
    total = float(sum(ratios))
    n = len(keys)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [keys[i] for i in order]
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


def leave_one_subject_out(dataset):
    """One fold per subject: (train keys, test keys, held-out subject)."""
    folds = []
    for held in dataset.subjects:
        train = [k for k in dataset.keys() if k[0] != held]
        test = [k for k in dataset.keys() if k[0] == held]
        folds.append((train, test, held))
    return folds


def subset(keys, fraction, seed=0):
    """Seeded random subset of ``keys`` (order preserved)."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"subset fraction must be in (0, 1], got {fraction}")
    keys = list(keys)
    if fraction == 1:
        return keys
    m = max(1, int(round(fraction * len(keys))))
    pick = np.sort(np.random.default_rng(seed).choice(len(keys), size=m, replace=False))
    return [keys[i] for i in pick]
