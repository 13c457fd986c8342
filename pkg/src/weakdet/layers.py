"""Stateful layer wrappers around the kernels in :mod:`weakdet.tensor`.

A layer owns its :class:`Param` objects, remembers the cache of its last
forward call, and accumulates parameter gradients on ``backward``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Param


class Layer:
    def params(self):
        return []

    def buffers(self):
        return []


class Conv2d(Layer):
    def __init__(self, name, c_in, c_out, rng, k=3):
        fan_in = c_in * k * k
        self.weight = Param(f"{name}.weight", T.he_uniform(rng, (c_out, c_in, k, k), fan_in))
        self.bias = Param(f"{name}.bias", np.zeros(c_out, dtype=np.float32))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        y, self._cache = T.conv2d_forward(x, self.weight.value, self.bias.value)
        return y

    def backward(self, dy):
        dx, dw, db = T.conv2d_backward(dy, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class ConvTranspose2d(Layer):
    def __init__(self, name, c_in, c_out, rng):
        self.weight = Param(f"{name}.weight", T.he_uniform(rng, (c_in, c_out, 2, 2), c_in))
        self.bias = Param(f"{name}.bias", np.zeros(c_out, dtype=np.float32))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        y, self._cache = T.conv2d_transpose_forward(x, self.weight.value, self.bias.value)
        return y

    def backward(self, dy):
        dx, dw, db = T.conv2d_transpose_backward(dy, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm2d(Layer):
    def __init__(self, name, c):
        self.gamma = Param(f"{name}.gamma", np.ones(c, dtype=np.float32))
        self.beta = Param(f"{name}.beta", np.zeros(c, dtype=np.float32))
        # running statistics are stored as Params (never stepped) so they
        # travel through the checkpoint with everything else
        self.running_mean = Param(f"{name}.running_mean", np.zeros(c, dtype=np.float32))
        self.running_var = Param(f"{name}.running_var", np.ones(c, dtype=np.float32))

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x, mode):
        y, self._cache = T.batchnorm2d_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean.value, self.running_var.value, mode)
        return y

    def backward(self, dy):
        dx, dg, db = T.batchnorm2d_backward(dy, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class Linear(Layer):
    def __init__(self, name, d_in, d_out, rng):
        self.weight = Param(f"{name}.weight", T.he_uniform(rng, (d_out, d_in), d_in))
        self.bias = Param(f"{name}.bias", np.zeros(d_out, dtype=np.float32))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        y, self._cache = T.linear_forward(x, self.weight.value, self.bias.value)
        return y

    def backward(self, dy):
        dx, dw, db = T.linear_backward(dy, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class DoubleConv(Layer):
    """(conv3x3 -> batch-norm -> ReLU) twice, then optional channel dropout."""

    def __init__(self, name, c_in, c_out, rng, dropout2d=0.0):
        self.conv1 = Conv2d(f"{name}.conv1", c_in, c_out, rng)
        self.bn1 = BatchNorm2d(f"{name}.bn1", c_out)
        self.conv2 = Conv2d(f"{name}.conv2", c_out, c_out, rng)
        self.bn2 = BatchNorm2d(f"{name}.bn2", c_out)
        self.p = dropout2d

    def params(self):
        return (self.conv1.params() + self.bn1.params()
                + self.conv2.params() + self.bn2.params())

    def buffers(self):
        return self.bn1.buffers() + self.bn2.buffers()

    def forward(self, x, mode, rng=None):
        x = self.bn1.forward(self.conv1.forward(x), mode)
        x, self._r1 = T.relu_forward(x)
        x = self.bn2.forward(self.conv2.forward(x), mode)
        x, self._r2 = T.relu_forward(x)
        x, self._keep = T.dropout2d_forward(x, self.p, mode, rng)
        return x

    def backward(self, dy):
        dy = T.dropout2d_backward(dy, self._keep)
        dy = T.relu_backward(dy, self._r2)
        dy = self.conv2.backward(self.bn2.backward(dy))
        dy = T.relu_backward(dy, self._r1)
        return self.conv1.backward(self.bn1.backward(dy))
