"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class SgdState:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    velocity: dict = field(default_factory=dict)


def sgd_step(params, state):
    """One update, in place::

        v <- momentum * v + (grad + weight_decay * theta)
        theta <- theta - learning_rate * v
    """
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        g = p.grad + state.weight_decay * p.value if state.weight_decay else p.grad
        v = state.velocity.get(p.name)
        if v is None or v.shape != p.value.shape:
            v = np.zeros_like(p.value)
        v = state.momentum * v + g
        state.velocity[p.name] = v
        p.value = (p.value - state.learning_rate * v).astype(p.value.dtype, copy=False)
    return params
