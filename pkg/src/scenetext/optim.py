from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    """Running averages ``E[g^2]`` and ``E[dx^2]`` per parameter."""

    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: list = field(default_factory=list)
    sq_delta: list = field(default_factory=list)
    steps: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], rho: float = 0.95, eps: float = 1e-6):
        return cls(rho, eps, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adadelta_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
                  lr: float = 1.0) -> None:
    """In-place ADADELTA update scaled by the learning-rate multiplier ``lr``."""
    if len(params) != len(state.sq_grad):
        raise ValueError(f"{len(params)} parameters but state tracks {len(state.sq_grad)}")
    rho, eps = state.rho, state.eps
    for p, g, eg, ed in zip(params, grads, state.sq_grad, state.sq_delta):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        eg *= rho
        eg += (1 - rho) * g * g
        delta = np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        p.data -= (lr * delta).astype(p.dtype)
    state.steps += 1


class Adadelta:
    def __init__(self, params: Sequence[Tensor], rho: float = 0.95, eps: float = 1e-6):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params, rho, eps)

    def step(self, lr: float = 1.0) -> None:
        adadelta_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def lr_multiplier(step: int, total_steps: int, milestones=(0.6, 0.8), factor: float = 0.1) -> float:
    """1.0, then ``factor`` after each milestone fraction of ``total_steps``."""
    lr = 1.0
    for frac in milestones:
        if step >= int(round(frac * total_steps)):
            lr *= factor
    return lr
