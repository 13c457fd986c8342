"""Dense NCHW kernels with hand-written backward passes.

Every op comes as a ``*_forward`` returning ``(out, cache)`` and a matching
``*_backward`` consuming the upstream gradient and that cache. Arrays are
plain :class:`numpy.ndarray`; the dtype of the input is preserved, so the
same kernels run in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Param:
    """A trainable array and its gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)


def _check_4d(x, what="input"):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be 4-D (n, c, h, w), got shape {x.shape}")


def _check_finite(x, what):
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# convolution

def _im2col(x, k):
    n, c, h, w = x.shape
    p = k // 2
    xt = x.transpose(1, 0, 2, 3)
    if p:
        xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = xt[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(c * k * k, n * h * w)


def _col2im(dcols, shape, k):
    n, c, h, w = shape
    p = k // 2
    dcols = dcols.reshape(c, k, k, n, h, w)
    if k == 1:
        return dcols[:, 0, 0].transpose(1, 0, 2, 3)
    dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + h, kx:kx + w] += dcols[:, ky, kx]
    return dxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)


def conv2d_forward(x, weight, bias):
    """Stride-1 'same' convolution with an odd square kernel.

    ``weight`` has shape (c_out, c_in, k, k); padding is k // 2, so the
    spatial size is preserved.
    """
    _check_4d(x)
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be odd and square, got {k}x{k2}")
    n, c, h, w = x.shape
    if c != c_in:
        raise DimensionError(f"conv2d expects {c_in} input channels, got {c}")
    if k > 1 and (h < k or w < k):
        raise DimensionError(f"spatial size {h}x{w} smaller than kernel {k}")
    _check_finite(x, "conv2d input")
    cols = _im2col(x, k)
    out = weight.reshape(c_out, -1) @ cols
    out = out.reshape(c_out, n, h, w).transpose(1, 0, 2, 3)
    out = out + bias.reshape(1, -1, 1, 1)
    return out, (cols, x.shape, weight)


def conv2d_backward(dout, cache):
    cols, shape, weight = cache
    c_out, _, k, _ = weight.shape
    dm = dout.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dweight = (dm @ cols.T).reshape(weight.shape)
    dbias = dm.sum(axis=1)
    dcols = weight.reshape(c_out, -1).T @ dm
    dx = _col2im(dcols, shape, k)
    return dx, dweight, dbias


def conv2d_transpose_forward(x, weight, bias):
    """2x2 stride-2 transposed convolution; doubles h and w.

    ``weight`` has shape (c_in, c_out, 2, 2). The stride equals the kernel
    so output tiles never overlap.
    """
    _check_4d(x)
    c_in, c_out, kh, kw = weight.shape
    if (kh, kw) != (2, 2):
        raise DimensionError(f"transposed conv kernel must be 2x2, got {kh}x{kw}")
    n, c, h, w = x.shape
    if c != c_in:
        raise DimensionError(f"conv2d_transpose expects {c_in} input channels, got {c}")
    _check_finite(x, "conv2d_transpose input")
    xm = x.transpose(0, 2, 3, 1).reshape(-1, c_in)
    y = xm @ weight.reshape(c_in, -1)
    y = y.reshape(n, h, w, c_out, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    y = y.reshape(n, c_out, 2 * h, 2 * w) + bias.reshape(1, -1, 1, 1)
    return y, (xm, x.shape, weight)


def conv2d_transpose_backward(dout, cache):
    xm, shape, weight = cache
    n, c_in, h, w = shape
    c_out = weight.shape[1]
    dm = dout.reshape(n, c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, c_out * 4)
    dweight = (xm.T @ dm).reshape(weight.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    dx = (dm @ weight.reshape(c_in, -1).T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
    return dx, dweight, dbias


# --------------------------------------------------------------------------
# pooling

def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Returns the pooled map and the argmax index
    (0..3, row-major within the window) of every output cell."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, shape = cache
    n, c, h, w = shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(shape)


def global_avg_pool_forward(x):
    _check_4d(x)
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], shape).copy()


# --------------------------------------------------------------------------
# activations

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    return expit(x)


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(dout, s):
    return dout * s * (1 - s)


def softmax(z, axis=1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_forward(z, axis=1):
    p = softmax(z, axis)
    return p, (p, axis)


def softmax_backward(dout, cache):
    p, axis = cache
    return p * (dout - (dout * p).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# normalization and regularization

def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, mode):
    """Per-channel batch normalization.

    In ``"train"`` mode batch statistics are used and the running buffers
    (modified in place) move toward them with momentum 0.1; the running
    variance uses the unbiased estimator. ``"eval"`` uses the buffers.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    g = gamma.reshape(1, -1, 1, 1)
    b = beta.reshape(1, -1, 1, 1)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise NumericError("batchnorm2d in train mode needs batch*h*w >= 2")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(1, -1, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv.reshape(1, -1, 1, 1)
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * (m / (m - 1))
        return xhat * g + b, ("train", xhat, inv, gamma)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + BN_EPS)
        xhat = (x - running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        return (xhat * g + b).astype(x.dtype, copy=False), ("eval", xhat, inv, gamma)
    raise ConfigError(f"unknown mode {mode!r}")


def batchnorm2d_backward(dout, cache):
    mode, xhat, inv, gamma = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(1, -1, 1, 1)
    if mode == "eval":
        return dxhat * inv.reshape(1, -1, 1, 1), dgamma, dbeta
    mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = (dxhat - mean_d - xhat * mean_dx) * inv.reshape(1, -1, 1, 1)
    return dx, dgamma, dbeta


def _check_p(p):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")


def dropout_forward(x, p, mode, rng=None):
    """Inverted dropout. The returned cache is the scaled keep-mask (or
    ``None`` when the op is the identity)."""
    _check_p(p)
    if mode != "train" or p == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return x * keep, keep


def dropout2d_forward(x, p, mode, rng=None):
    """Channel dropout: zeroes whole (n, c) planes."""
    _check_p(p)
    _check_4d(x)
    if mode != "train" or p == 0.0:
        return x, None
    n, c = x.shape[:2]
    keep = (rng.random((n, c, 1, 1)) >= p).astype(x.dtype) / (1 - p)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout if keep is None else dout * keep


dropout2d_backward = dropout_backward


# --------------------------------------------------------------------------
# dense

def linear_forward(x, weight, bias):
    """``x`` (n, in) times ``weight`` (out, in) transposed plus ``bias``."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear expects input (n, {weight.shape[1]}), got {x.shape}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(dout, cache):
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


# --------------------------------------------------------------------------
# initialization

def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
