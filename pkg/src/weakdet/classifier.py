"""Presence classifier on top of the backbone bridge features."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import Linear

HIDDEN = 256
DROPOUT = 0.5
PRESENT = 1


class ClassifierHead:
    """GAP -> linear + ReLU -> dropout -> linear -> softmax over
    (absent, present)."""

    def __init__(self, in_channels, hidden=HIDDEN, dropout=DROPOUT, seed=0):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.dropout = dropout
        self.fc_hidden = Linear("cls.fc_hidden", in_channels, hidden, rng)
        self.fc_out = Linear("cls.fc_out", hidden, 2, rng)

    def params(self):
        return self.fc_hidden.params() + self.fc_out.params()

    def buffers(self):
        return []

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.params():
            p.astype(dtype)
        return self

    def forward_features(self, feats, mode="eval", rng=None):
        """Forward from pooled feature vectors (n, c)."""
        if feats.ndim != 2 or feats.shape[1] != self.in_channels:
            raise DimensionError(
                f"classifier expects {self.in_channels} channels, got {feats.shape}")
        h = self.fc_hidden.forward(feats)
        h, self._relu = T.relu_forward(h)
        h, self._keep = T.dropout_forward(h, self.dropout, mode, rng)
        z = self.fc_out.forward(h)
        p, self._sm = T.softmax_forward(z, axis=1)
        return p

    def forward(self, bridge, mode="eval", rng=None):
        if bridge.ndim != 4 or bridge.shape[1] != self.in_channels:
            raise DimensionError(
                f"classifier expects {self.in_channels} channels, got {bridge.shape}")
        feats, self._gap = T.global_avg_pool_forward(bridge)
        return self.forward_features(feats, mode, rng)

    def backward_features(self, dprobs):
        dz = T.softmax_backward(dprobs, self._sm)
        dh = self.fc_out.backward(dz)
        dh = T.dropout_backward(dh, self._keep)
        dh = T.relu_backward(dh, self._relu)
        return self.fc_hidden.backward(dh)

    def backward(self, dprobs):
        return T.global_avg_pool_backward(self.backward_features(dprobs), self._gap)


def classify(bridge, head, mode="eval", rng=None):
    return head.forward(bridge, mode, rng)


def classifier_loss(probs, labels, w_c=1.0, eps=1e-12):
    """Binary cross-entropy of the present-class probability against soft
    labels; returns ``(value, grad wrt probs)``."""
    labels = np.asarray(labels, dtype=probs.dtype).reshape(-1)
    p1 = np.clip(probs[:, PRESENT], eps, 1.0)
    p0 = np.clip(probs[:, 1 - PRESENT], eps, 1.0)
    n = probs.shape[0]
    loss = -(w_c * labels * np.log(p1) + (1 - labels) * np.log(p0)).mean()
    grad = np.zeros_like(probs)
    grad[:, PRESENT] = -w_c * labels / p1 / n
    grad[:, 1 - PRESENT] = -(1 - labels) / p0 / n
    return float(loss), grad
