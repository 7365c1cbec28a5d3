"""Teacher-side classification head over frozen hidden states.

The language model itself is never run here. Its last-layer hidden states
arrive through a feature store, and only the sigmoid classification head on
top of them is represented (and, when needed, trained).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import ndgrad as nd
from .ehr import Sample
from .optim import Adam

if TYPE_CHECKING:
    from .distill import TeacherFeatureStore


@dataclass
class TeacherHead:
    w_cls: np.ndarray  # (n_med, d_h)
    gamma: float = 0.5

    def __post_init__(self):
        self.w_cls = np.asarray(self.w_cls, dtype=np.float64)
        if self.w_cls.ndim != 2 or not np.isfinite(self.w_cls).all():
            raise ValueError("W_CLS must be a finite 2-d matrix")

    @property
    def d_h(self) -> int:
        return self.w_cls.shape[1]


def teacher_predict(h, head: TeacherHead) -> np.ndarray:
    """sigmoid(W_CLS h) for one hidden state or a batch of rows."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != head.d_h:
        raise nd.ShapeError(f"hidden state dim {h.shape[-1]} vs head d_h {head.d_h}")
    rows = h.reshape(-1, head.d_h)
    out = nd.sigmoid(rows @ head.w_cls.T).value
    return out.reshape(h.shape[:-1] + (head.w_cls.shape[0],))


def sft_loss(probs, labels) -> nd.Tensor:
    """Fine-tuning objective of the classification head; same form as the student BCE."""
    return nd.bce_with_probs(probs, labels)


def fit_teacher_head(store: "TeacherFeatureStore", samples: Sequence[Sample], epochs: int = 50,
                     lr: float = 1e-2, batch_size: int = 32, seed: int = 0,
                     gamma: float = 0.5) -> tuple[TeacherHead, float]:
    """Train W_CLS on frozen features with Adam; returns the head and last epoch's mean loss."""
    h = store.matrix([s.sample_id for s in samples])
    y = np.stack([s.label for s in samples])
    rng = np.random.default_rng(seed)
    w = nd.Tensor(rng.normal(0.0, 0.02, size=(y.shape[1], h.shape[1])), requires_grad=True,
                  name="W_CLS")
    opt = Adam([w], lr=lr)
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            with nd.Tape() as tape:
                loss = sft_loss(nd.sigmoid(nd.linear(h[idx], w)), y[idx])
            opt.step(nd.backward(tape, loss, [w]))
            losses.append(loss.item())
        last = float(np.mean(losses)) if losses else last
    return TeacherHead(w.value.copy(), gamma), last
