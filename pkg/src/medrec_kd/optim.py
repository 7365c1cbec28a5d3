"""Adam with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ndgrad import NonFiniteError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update; returns new parameter arrays and the advanced state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must align")
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} vs parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
        with np.errstate(over="ignore", invalid="ignore"):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            step = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(step).all():
            raise NonFiniteError("non-finite parameter after update")
        new_p.append(step)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper that updates leaf tensors in place."""

    def __init__(self, tensors: Sequence[Tensor], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.tensors = list(tensors)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState.zeros_like([t.value for t in self.tensors])

    def step(self, grads: dict) -> None:
        g = [grads.get(t, np.zeros_like(t.value)) for t in self.tensors]
        new, self.state = adam_step([t.value for t in self.tensors], g, self.state,
                                    self.lr, self.betas, self.eps)
        for t, value in zip(self.tensors, new):
            if not np.isfinite(value).all():
                raise NonFiniteError(f"parameter {t.name} became non-finite")
            t.value = value
