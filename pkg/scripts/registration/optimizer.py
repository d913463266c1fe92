"""
Adam over a list of parameter tensors.

No learning-rate schedule and no gradient clipping: each scale runs a fixed
number of steps at a constant rate.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from registration.errors import ContractError
from registration.tensor_core import Tensor


@dataclass
class AdamState:
    """Step count, moment estimates and hyperparameters of one optimization loop."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def ensure_moments(self, params: Sequence[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        elif len(self.m) != len(params):
            raise ContractError(f"AdamState tracks {len(self.m)} parameters, got {len(params)}")


def step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """
    One bias-corrected Adam update, in place.

    Raises:
        ContractError: if any gradient is missing or mis-shaped.
    """
    if len(grads) != len(params):
        raise ContractError(f"Expected {len(params)} gradients, got {len(grads)}")
    for param, grad in zip(params, grads):
        label = param.name or "parameter"
        if grad is None:
            raise ContractError(f"Missing gradient for {label}; run backward() before step()")
        if grad.shape != param.shape:
            raise ContractError(f"Gradient for {label} has shape {grad.shape}, expected {param.shape}")

    state.ensure_moments(params)
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t

    for i, (param, grad) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (grad * grad)
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam bound to a fixed parameter list, reading gradients from ``Tensor.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None

    def step(self) -> None:
        step(self.params, [p.grad for p in self.params], self.state)
