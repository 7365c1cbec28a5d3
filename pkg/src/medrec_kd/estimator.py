"""scikit-learn style wrapper around the student recommender.

``X`` is always a sequence of :class:`~medrec_kd.ehr.Sample`; labels travel
inside the samples, so ``y`` is accepted for API symmetry and must be None
or agree with them.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .distill import DistillConfig, TeacherFeatureStore
from .ehr import DatasetSplit, Sample
from .metrics import mean_prauc
from .model import StudentConfig, recommend
from .trainer import TrainConfig, train_student


def check_samples(X, n_medications: Optional[int] = None, vocab_sizes=None,
                  profile_cardinalities=None) -> list[Sample]:
    """Validate a batch of samples and return it as a list."""
    if isinstance(X, Sample):
        X = [X]
    try:
        X = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of Sample, got {type(X).__name__}") from None
    if not X:
        raise ValueError("empty sample list")
    bad = [type(s).__name__ for s in X if not isinstance(s, Sample)]
    if bad:
        raise TypeError(f"expected Sample instances, got {bad[0]}")
    widths = {s.n_medications for s in X}
    if len(widths) > 1:
        raise ValueError(f"samples disagree on the medication vocabulary size: {sorted(widths)}")
    if n_medications is not None and widths != {n_medications}:
        raise ValueError(f"samples have {widths.pop()} medications, estimator expects {n_medications}")
    if vocab_sizes is not None:
        seen = _max_ids(X)
        for kind, top, size in zip(("diagnosis", "procedure", "medication"), seen, vocab_sizes):
            if top >= size:
                raise ValueError(f"{kind} id {top} outside fitted vocabulary of size {size}")
    if profile_cardinalities is not None:
        for s in X:
            s.profile.validate(profile_cardinalities)
    return X


def _max_ids(samples: Sequence[Sample]) -> tuple[int, int, int]:
    top = [-1, -1, -1]
    for s in samples:
        visits = [(v.diagnoses, v.procedures, v.medications) for v in s.history]
        visits.append((s.diagnoses, s.procedures, s.target))
        for codes in visits:
            for k, ids in enumerate(codes):
                if ids:
                    top[k] = max(top[k], max(ids))
    return tuple(top)


def _check_y(X: Sequence[Sample], y) -> None:
    if y is None:
        return
    y = np.asarray(y)
    labels = np.stack([s.label for s in X])
    if y.shape != labels.shape or not np.array_equal(y > 0, labels > 0):
        raise ValueError("y disagrees with the labels carried by the samples")


class MedicationRecommender(BaseEstimator):
    """Distilled student recommender with fit / predict_proba / predict / transform."""

    def __init__(self, vocab_sizes=None, profile_cardinalities=None, d_e=64, d_t=64,
                 n_set_layers=1, n_visit_layers=1, n_heads=4, d_h=128, max_visits=32,
                 shared_visit_encoder=True, gamma=0.5, alpha=0.4, beta=5e-3, tau=1.0,
                 denominator="as-written", lr=5e-4, batch_size=4, max_epochs=30,
                 ablation=(), random_state=0):
        self.vocab_sizes = vocab_sizes
        self.profile_cardinalities = profile_cardinalities
        self.d_e = d_e
        self.d_t = d_t
        self.n_set_layers = n_set_layers
        self.n_visit_layers = n_visit_layers
        self.n_heads = n_heads
        self.d_h = d_h
        self.max_visits = max_visits
        self.shared_visit_encoder = shared_visit_encoder
        self.gamma = gamma
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.denominator = denominator
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.ablation = ablation
        self.random_state = random_state

    def _student_config(self, samples: Sequence[Sample]) -> StudentConfig:
        if self.vocab_sizes is not None:
            n_diag, n_proc, n_med = self.vocab_sizes
        else:
            top = _max_ids(samples)
            n_diag, n_proc, n_med = top[0] + 1, max(top[1] + 1, 1), samples[0].n_medications
        cards = self.profile_cardinalities
        if cards is None:
            width = len(samples[0].profile.indices)
            cards = [1 + max(s.profile.indices[i] for s in samples) for i in range(width)]
        return StudentConfig(n_diag, n_proc, n_med, tuple(cards), self.d_e, self.d_t,
                             self.n_set_layers, self.n_visit_layers, self.n_heads, self.gamma,
                             self.d_h, self.max_visits, self.shared_visit_encoder,
                             seed=self.random_state)

    def fit(self, X, y=None, teacher: Optional[TeacherFeatureStore] = None, X_val=None):
        """Train on ``X``; ``X_val`` drives best-epoch selection when given."""
        X = check_samples(X)
        _check_y(X, y)
        val = check_samples(X_val, X[0].n_medications) if X_val is not None else []
        config = self._student_config(X + val)
        check_samples(X + val, config.n_med, (config.n_diag, config.n_proc, config.n_med),
                      config.profile_cardinalities)
        train_config = TrainConfig(lr=self.lr, batch_size=self.batch_size,
                                   max_epochs=self.max_epochs, seed=self.random_state,
                                   ablation=frozenset(self.ablation),
                                   distill=DistillConfig(self.alpha, self.beta, self.tau,
                                                         self.denominator))
        split = DatasetSplit(tuple(X), tuple(val), (), self.random_state)
        self.model_, self.report_ = train_student(split, teacher, config, train_config)
        self.config_ = config
        self.n_medications_ = config.n_med
        return self

    def _checked(self, X) -> list[Sample]:
        check_is_fitted(self, "model_")
        c = self.config_
        return check_samples(X, c.n_med, (c.n_diag, c.n_proc, c.n_med), c.profile_cardinalities)

    def predict_proba(self, X) -> np.ndarray:
        samples = self._checked(X)
        return self.model_.predict_proba(samples)

    def predict(self, X) -> np.ndarray:
        """Multi-hot recommendations, 1 where the probability exceeds gamma."""
        return (self.predict_proba(X) > self.gamma).astype(np.int64)

    def recommend(self, X) -> list[set[int]]:
        return [recommend(p, self.gamma) for p in self.predict_proba(X)]

    def transform(self, X) -> np.ndarray:
        """Fused patient representations before the output layer."""
        samples = self._checked(X)
        return self.model_.transform(samples)

    def score(self, X, y=None) -> float:
        """Mean per-sample PRAUC."""
        X = self._checked(X)
        _check_y(X, y)
        return mean_prauc(self.model_.predict_proba(X), np.stack([s.label for s in X]))
