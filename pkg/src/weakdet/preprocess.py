"""Frame stacking, normalization, box masks and training-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AnnotationError, ConfigError, DataError, DimensionError

# largest float32 strictly below 1
_BELOW_ONE = float(np.nextafter(np.float32(1), np.float32(0)))


def normalize(frame):
    """Map 8-bit intensities into [0, 1) by dividing by 256."""
    return np.asarray(frame, dtype=np.float32) / np.float32(256.0)


def stack_frames(sequence, t, mode="three"):
    """Channels (t-2, t-1, t), oldest first, normalized.

    Missing predecessors at the start of a sequence are replaced by frame
    ``t``. ``mode="single"`` replicates frame ``t`` into all three channels.
    """
    if len(sequence) == 0:
        raise DataError("cannot stack frames of an empty sequence")
    if not 0 <= t < len(sequence):
        raise IndexError(f"frame index {t} outside sequence of length {len(sequence)}")
    if mode == "single":
        idx = (t, t, t)
    elif mode == "three":
        idx = tuple(t - d if t - d >= 0 else t for d in (2, 1, 0))
    else:
        raise ConfigError(f"frame mode must be 'single' or 'three', got {mode!r}")
    return np.stack([normalize(sequence[i]) for i in idx])


def rasterize_mask(box, h, w):
    """Binary (h, w) mask, 1 on pixels whose centers fall inside the box."""
    x0 = max(int(np.ceil(box.x_min - 0.5)), 0)
    x1 = min(int(np.ceil(box.x_max - 0.5)), w)
    y0 = max(int(np.ceil(box.y_min - 0.5)), 0)
    y1 = min(int(np.ceil(box.y_max - 0.5)), h)
    if x1 <= x0 or y1 <= y0:
        raise AnnotationError(f"box {box} has zero area inside a {h}x{w} image")
    mask = np.zeros((h, w), dtype=np.float32)
    mask[y0:y1, x0:x1] = 1.0
    return mask


def _warp(arr, coords, order=1):
    """Resample a (h, w) or (c, h, w) array at ``coords`` = (rows, cols)
    with border replication."""
    if arr.ndim == 2:
        return ndimage.map_coordinates(arr, coords, order=order, mode="nearest")
    return np.stack([ndimage.map_coordinates(a, coords, order=order, mode="nearest")
                     for a in arr])


def binarize(mask):
    return (mask >= 0.5).astype(np.float32)


def elastic_deform(image, mask, sigma_px, alpha_px, rng, rebinarize=True):
    """Warp image and mask by the same smooth random displacement field.

    Each axis gets uniform[-1, 1] noise, Gaussian-smoothed with std
    ``sigma_px`` and rescaled so its largest magnitude is ``alpha_px``.
    """
    if not sigma_px > 0:
        raise ConfigError(f"elastic sigma must be positive, got {sigma_px}")
    if alpha_px < 0:
        raise ConfigError(f"elastic alpha must be >= 0, got {alpha_px}")
    h, w = mask.shape
    fields = []
    for _ in range(2):
        d = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=(h, w)), sigma_px, mode="reflect")
        peak = np.abs(d).max()
        fields.append(d * (alpha_px / peak) if peak > 0 else d * 0.0)
    if alpha_px == 0:
        return image.copy(), mask.copy()
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.array([rows + fields[0], cols + fields[1]])
    img = _warp(image, coords).astype(image.dtype, copy=False)
    m = _warp(mask, coords).astype(np.float32, copy=False)
    return img, binarize(m) if rebinarize else m


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_range_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    translate_frac: float = 0.1
    brightness_delta: float = 0.2
    contrast_range: tuple = (0.7, 1.3)
    elastic_sigma_range_px: tuple = (8.0, 16.0)
    elastic_alpha_range_px: tuple = (0.0, 20.0)
    enable_flip: bool = True
    enable_rotate: bool = True
    enable_scale: bool = True
    enable_translate: bool = True
    enable_brightness: bool = True
    enable_contrast: bool = True
    enable_elastic: bool = True

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.contrast_range = tuple(float(v) for v in self.contrast_range)
        self.elastic_sigma_range_px = tuple(float(v) for v in self.elastic_sigma_range_px)
        self.elastic_alpha_range_px = tuple(float(v) for v in self.elastic_alpha_range_px)
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must be in [0, 1]")
        for name in ("rotation_range_deg", "translate_frac", "brightness_delta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0")
        for name in ("scale_range", "contrast_range", "elastic_sigma_range_px",
                     "elastic_alpha_range_px"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ConfigError(f"{name} must be a finite (lo, hi) pair with lo <= hi")
        if self.scale_range[0] <= 0 or self.contrast_range[0] < 0:
            raise ConfigError("scale must be positive and contrast non-negative")
        if self.elastic_sigma_range_px[0] <= 0 or self.elastic_alpha_range_px[0] < 0:
            raise ConfigError("elastic sigma must be positive and alpha non-negative")

    @classmethod
    def disabled(cls):
        return cls(enable_flip=False, enable_rotate=False, enable_scale=False,
                   enable_translate=False, enable_brightness=False,
                   enable_contrast=False, enable_elastic=False)


def geometric_augment(image, mask, config, rng, rebinarize=True):
    """Random flip / rotation / scale / translation, identical for image and
    mask. Random draws happen whether or not a transform is enabled, so
    toggling one flag does not shift the stream for the others."""
    h, w = mask.shape
    flip = rng.random() < config.flip_prob
    angle = np.deg2rad(rng.uniform(-1, 1) * config.rotation_range_deg)
    scale = rng.uniform(*config.scale_range)
    shift = rng.uniform(-1, 1, size=2) * config.translate_frac * np.array([h, w])
    flip = flip and config.enable_flip
    angle = angle if config.enable_rotate else 0.0
    scale = scale if config.enable_scale else 1.0
    if not config.enable_translate:
        shift = np.zeros(2)
    img, m = image, mask
    if flip:
        img, m = img[..., ::-1].copy(), m[:, ::-1].copy()
    if angle == 0.0 and scale == 1.0 and not shift.any():
        return img.copy(), m.copy()
    # output pixel p samples input at  c + R(-angle)/scale (p - c - shift)
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    cos, sin = np.cos(angle), np.sin(angle)
    inv = np.array([[cos, sin], [-sin, cos]]) / scale
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    p = np.stack([rows.ravel() - c[0] - shift[0], cols.ravel() - c[1] - shift[1]])
    src = inv @ p + c[:, None]
    coords = src.reshape(2, h, w)
    img = _warp(img, coords).astype(image.dtype, copy=False)
    m = _warp(m, coords).astype(np.float32, copy=False)
    return img, binarize(m) if rebinarize else m


def intensity_augment(image, config, rng):
    """Contrast about 0.5 then brightness shift, clamped to [0, 1)."""
    gain = rng.uniform(*config.contrast_range)
    delta = rng.uniform(-1, 1) * config.brightness_delta
    out = image
    if config.enable_contrast:
        out = gain * (out - 0.5) + 0.5
    if config.enable_brightness:
        out = out + delta
    return np.clip(out, 0.0, _BELOW_ONE).astype(image.dtype, copy=False)


def geometric_intensity_augment(image, mask, config, rng):
    img, m = geometric_augment(image, mask, config, rng)
    return intensity_augment(img, config, rng), m


def augment(image, mask, config, rng):
    """Full per-sample pipeline: geometric, elastic, then intensity."""
    img, m = geometric_augment(image, mask, config, rng)
    sigma = rng.uniform(*config.elastic_sigma_range_px)
    alpha = rng.uniform(*config.elastic_alpha_range_px)
    if config.enable_elastic:
        img, m = elastic_deform(img, m, sigma, alpha, rng)
    return intensity_augment(img, config, rng), m


@dataclass
class MixupPolicy:
    alpha: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"mixup alpha must be > 0, got {self.alpha}")

    def sample(self, rng, size=None):
        return rng.beta(self.alpha, self.alpha, size=size)


def mixup(pair_a, pair_b, policy, rng, lam=None):
    """Convex combination of two (input, mask, label) triples with one
    lambda ~ Beta(alpha, alpha). Returns the mixed triple and lambda."""
    xa, ya, la = pair_a
    xb, yb, lb = pair_b
    if np.shape(xa) != np.shape(xb) or np.shape(ya) != np.shape(yb):
        raise DimensionError("mixup pairs must have matching dims")
    if lam is None:
        lam = float(policy.sample(rng)) if policy.enabled else 1.0
    mix = lambda a, b: lam * np.asarray(a, dtype=np.float64) + (1 - lam) * np.asarray(b, dtype=np.float64)  # noqa: E731
    x = mix(xa, xb).astype(np.asarray(xa).dtype, copy=False)
    y = mix(ya, yb).astype(np.asarray(ya).dtype, copy=False)
    return (x, y, float(mix(la, lb))), lam


def mixup_batch(inputs, masks, labels, policy, rng):
    """Mix every sample with a randomly chosen partner from the same batch."""
    n = len(inputs)
    partner = rng.permutation(n)
    lam = policy.sample(rng, size=n) if policy.enabled else np.ones(n)
    # mix in float64 so the float32 result never leaves [min, max]
    lam_x = lam.reshape(-1, *([1] * (inputs.ndim - 1)))
    lam_y = lam.reshape(-1, *([1] * (masks.ndim - 1)))
    x = (lam_x * inputs + (1 - lam_x) * inputs[partner]).astype(inputs.dtype)
    y = (lam_y * masks + (1 - lam_y) * masks[partner]).astype(masks.dtype)
    lab = lam * labels + (1 - lam) * labels[partner]
    return x, y, lab.astype(np.float32)
