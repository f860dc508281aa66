"""Adam optimizer with bias correction.

State is kept as flat lists of moment arrays aligned with a fixed parameter
traversal order; updates happen in place on the parameter arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
        )

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "epsilon": self.epsilon}


def adam_step(arrays, grads, state: AdamState) -> None:
    """One Adam update over aligned (parameter, gradient) lists, in place.

    No array is touched if any gradient is non-finite: the whole step is
    rejected with a NumericError so the caller can report and skip it.
    """
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeError(
            f"got {len(arrays)} parameters, {len(grads)} gradients, "
            f"{len(state.m)} moment arrays"
        )
    for i, (p, g) in enumerate(zip(arrays, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {i} shape {g.shape} != parameter shape {p.shape}")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i}; update rejected")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
