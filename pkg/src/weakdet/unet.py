"""Reduced-width U-Net backbone producing a full-resolution logit mask."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import Conv2d, ConvTranspose2d, DoubleConv

BASE_WIDTHS = (32, 64, 128, 256, 512)
DEFAULT_DROPOUT2D = 0.15
# the bridge runs 3x3 convs at 1/16 resolution and needs at least 3x3 pixels
MIN_SIZE = 48


def channel_widths(scale):
    """Feature widths of encoder levels 1-4 and the bridge for ``scale``."""
    return tuple(max(1, int(round(scale * w))) for w in BASE_WIDTHS)


class UNetLite:
    """Four-level U-Net with batch-norm, channel dropout and a 1x1 logit head.

    ``forward`` returns the logit map (n, 1, h, w) and the bridge activation
    (n, widths[4], h/16, w/16); ``backward`` takes gradients for both.
    """

    def __init__(self, channel_scale=1.0, in_channels=3, dropout2d=DEFAULT_DROPOUT2D, seed=0):
        self.channel_scale = float(channel_scale)
        self.in_channels = in_channels
        self.dropout2d = float(dropout2d)
        self.widths = channel_widths(channel_scale)
        rng = np.random.default_rng(seed)
        w = self.widths
        self.enc = []
        c = in_channels
        for i in range(4):
            self.enc.append(DoubleConv(f"enc{i + 1}", c, w[i], rng, dropout2d))
            c = w[i]
        self.bridge = DoubleConv("bridge", w[3], w[4], rng, dropout2d)
        self.up = []
        self.dec = []
        for i in reversed(range(4)):
            self.up.append(ConvTranspose2d(f"up{i + 1}", w[i + 1], w[i], rng))
            self.dec.append(DoubleConv(f"dec{i + 1}", 2 * w[i], w[i], rng))
        self.head = Conv2d("head", w[0], 1, rng, k=1)

    def blocks(self):
        return [*self.enc, self.bridge, *self.up, *self.dec, self.head]

    def params(self):
        return [p for b in self.blocks() for p in b.params()]

    def buffers(self):
        return [p for b in self.blocks() for p in b.buffers()]

    def astype(self, dtype):
        for p in self.params() + self.buffers():
            p.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"UNetLite expects (n, {self.in_channels}, h, w), got {x.shape}")
        h, w = x.shape[2:]
        if h % 16 or w % 16 or h < MIN_SIZE or w < MIN_SIZE:
            raise DimensionError(
                f"input spatial dims must be multiples of 16 and >= {MIN_SIZE}, got {h}x{w}")

    def encode(self, x, mode="eval", rng=None):
        """Contracting path and bridge only; returns the bridge activation."""
        self._check_input(x)
        for block in self.enc:
            x = block.forward(x, mode, rng)
            x, _ = T.maxpool2_forward(x)
        return self.bridge.forward(x, mode, rng)

    def forward(self, x, mode="eval", rng=None):
        self._check_input(x)
        skips = []
        self._pools = []
        for block in self.enc:
            x = block.forward(x, mode, rng)
            skips.append(x)
            x, cache = T.maxpool2_forward(x)
            self._pools.append(cache)
        bridge = self.bridge.forward(x, mode, rng)
        x = bridge
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = np.concatenate([up.forward(x), skip], axis=1)
            x = dec.forward(x, mode, rng)
        return self.head.forward(x), bridge

    def backward(self, dlogits, dbridge=None):
        """Accumulate parameter gradients; returns the input gradient."""
        dx = self.head.backward(dlogits)
        dskips = []
        for up, dec in zip(reversed(self.up), reversed(self.dec)):
            dcat = dec.backward(dx)
            c_up = up.bias.value.shape[0]
            dskips.append(dcat[:, c_up:])
            dx = up.backward(dcat[:, :c_up])
        if dbridge is not None:
            dx = dx + dbridge
        dx = self.bridge.backward(dx)
        # dskips runs level 1 -> 4, the encoder walk runs 4 -> 1
        for block, cache, dskip in zip(reversed(self.enc), reversed(self._pools), reversed(dskips)):
            dx = T.maxpool2_backward(dx, cache) + dskip
            dx = block.backward(dx)
        return dx
