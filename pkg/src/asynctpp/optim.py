"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["OptimState", "adam_step", "Adam", "TrainingDivergedError"]


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""


@dataclass
class OptimState:
    """First/second moment buffers, one pair per parameter, plus step count."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0

    @classmethod
    def init(cls, params: list[np.ndarray]) -> "OptimState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps_hat: float = 1e-8) -> OptimState:
    """One bias-corrected adaptive-moment update, applied to params in place."""
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("beta1 and beta2 must lie in [0, 1)")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and state must have matching lengths")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps_hat)).astype(p.dtype, copy=False)
    return state


class Adam:
    """Adam over a named parameter dict of leaf tensors.

    Missing gradients (parameters unused by a given loss) are treated as
    zero.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8):
        self.names = sorted(params)
        self.params = [params[n] for n in self.names]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_hat = eps_hat
        self.state = OptimState.init([p.data for p in self.params])

    def step(self, grads: dict[Tensor, Tensor]) -> None:
        grad_arrays = []
        for p in self.params:
            g = grads.get(p)
            grad_arrays.append(np.zeros_like(p.data) if g is None else g.data)
        adam_step([p.data for p in self.params], grad_arrays, self.state,
                  lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps_hat=self.eps_hat)
