"""SGD with Nesterov momentum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch


@dataclass
class OptimizerState:
    lr: float = 0.003
    momentum: float = 0.9
    velocity: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 0.003,
                   momentum: float = 0.9) -> "OptimizerState":
        return cls(lr, momentum, [np.zeros_like(p) for p in params])


def nesterov_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                  state: OptimizerState) -> None:
    """Update ``params`` and ``state.velocity`` in place.

    Per tensor::

        v <- mu * v - lr * g
        theta <- theta + mu * v - lr * g
    """
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ShapeMismatch("params, grads and velocity lists differ in length")
    mu, lr = state.momentum, state.lr
    for p, g, v in zip(params, grads, state.velocity):
        if not (p.shape == g.shape == v.shape):
            raise ShapeMismatch(f"param {p.shape}, grad {g.shape}, velocity {v.shape}")
        step = lr * g
        v *= mu
        v -= step
        p += mu * v - step
