"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = BETA1
    beta2: float = BETA2
    epsilon: float = EPSILON
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def hyperparameters(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "epsilon": self.epsilon}


def adam_step(params: list, grads: list, state: AdamState) -> None:
    """Apply one Adam update to ``params`` (numpy arrays, modified in place)."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_size = state.learning_rate / (1.0 - b1 ** t)
    inv_bc2 = 1.0 / (1.0 - b2 ** t)
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape}, moment {m.shape} disagree")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v * inv_bc2)
        denom += state.epsilon
        p -= (step_size * m / denom).astype(p.dtype, copy=False)


class Adam:
    """Optimizer over a list of leaf tensors; reads ``.grad`` and updates ``.data`` in place."""

    def __init__(self, params: list, lr: float, beta1: float = BETA1, beta2: float = BETA2,
                 epsilon: float = EPSILON):
        self.params: list[Tensor] = list(params)
        self.state = AdamState(learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)
