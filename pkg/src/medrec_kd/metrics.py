"""Set and ranking metrics, bootstrap evaluation and group reporting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

GROUPS = ("overall", "multi", "single")
GROUP_TITLES = {"overall": "Overall", "multi": "Multi-visit", "single": "Single-visit"}
METRICS = ("prauc", "jaccard", "f1")


class MetricError(ValueError):
    pass


def jaccard(pred: set, true: set) -> float:
    if not true:
        raise MetricError("jaccard: empty true set")
    union = len(pred | true)
    return len(pred & true) / union


def f1(pred: set, true: set) -> float:
    if not true:
        raise MetricError("f1: empty true set")
    hit = len(pred & true)
    if not pred or not hit:
        return 0.0
    precision, recall = hit / len(pred), hit / len(true)
    return 2 * precision * recall / (precision + recall)


def prauc(scores, label) -> float:
    """Average precision of one ranking; ties go to the lower medication id."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    label = np.asarray(label).reshape(-1)
    n_pos = int((label > 0).sum())
    if n_pos == 0:
        raise MetricError("prauc: no positive label")
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = label[order] > 0
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(np.arange(1, n_pos + 1) / ranks) / n_pos)


def mean_prauc(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean([prauc(p, y) for p, y in zip(probs, labels)]))


def per_sample_metrics(probs: np.ndarray, labels: np.ndarray, gamma: float) -> np.ndarray:
    """(n, 3) array of prauc, jaccard, f1 with pred set {k : p_k > gamma}."""
    out = np.empty((len(probs), 3))
    for i, (p, y) in enumerate(zip(probs, labels)):
        pred = set(np.flatnonzero(p > gamma).tolist())
        true = set(np.flatnonzero(y > 0).tolist())
        out[i] = (prauc(p, y), jaccard(pred, true), f1(pred, true))
    return out


@dataclass
class GroupResult:
    n_samples: int
    mean: dict
    std: dict


@dataclass
class EvalReport:
    groups: dict = field(default_factory=dict)   # group -> GroupResult; absent if empty
    gamma: float = 0.5
    seed: int = 0
    rounds: int = 10
    frac: float = 0.8
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "seed": self.seed, "rounds": self.rounds, "frac": self.frac,
                "groups": {g: {"n_samples": r.n_samples, "mean": r.mean, "std": r.std}
                           for g, r in self.groups.items()},
                "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def format_table(self) -> str:
        """Groups as rows, PRAUC / Jaccard / F1 as 'mean ± std' columns."""
        header = f"{'Group':<14}{'n':>6}  {'PRAUC':<17}{'Jaccard':<17}{'F1':<17}"
        lines = [header, "-" * len(header)]
        for g in GROUPS:
            r = self.groups.get(g)
            if r is None:
                lines.append(f"{GROUP_TITLES[g]:<14}{0:>6}  {'-':<17}{'-':<17}{'-':<17}")
                continue
            cells = "".join(f"{r.mean[m]:.4f} ± {r.std[m]:.4f}".ljust(17) for m in METRICS)
            lines.append(f"{GROUP_TITLES[g]:<14}{r.n_samples:>6}  {cells}")
        lines.append(f"gamma={self.gamma}  rounds={self.rounds}  frac={self.frac}  seed={self.seed}")
        return "\n".join(line.rstrip() for line in lines) + "\n"


def bootstrap_report(per_sample: np.ndarray, groups: Sequence[str], gamma: float,
                     rounds: int = 10, frac: float = 0.8, seed: int = 0) -> EvalReport:
    """Resample ceil(frac * n) samples without replacement per round.

    Each round's draw is shared by all groups; a group's round mean uses the
    drawn samples that belong to it. Std is the population std over rounds.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not 0.0 < frac <= 1.0:
        raise ValueError("frac must lie in (0, 1]")
    n = len(per_sample)
    if n == 0:
        raise MetricError("nothing to evaluate")
    groups = np.asarray(groups)
    rng = np.random.default_rng(seed)
    k = math.ceil(frac * n)
    round_means = {g: [] for g in GROUPS}
    for _ in range(rounds):
        idx = np.sort(rng.choice(n, size=k, replace=False))
        for g in GROUPS:
            sel = idx if g == "overall" else idx[groups[idx] == g]
            if sel.size:
                round_means[g].append(per_sample[sel].mean(axis=0))
    report = EvalReport(gamma=gamma, seed=seed, rounds=rounds, frac=frac)
    for g in GROUPS:
        members = n if g == "overall" else int((groups == g).sum())
        if not members or not round_means[g]:
            continue
        arr = np.stack(round_means[g])
        report.groups[g] = GroupResult(
            members,
            {m: float(v) for m, v in zip(METRICS, arr.mean(axis=0))},
            {m: float(v) for m, v in zip(METRICS, arr.std(axis=0))})
    return report


def evaluate(model, samples: Sequence, gamma: float = 0.5, rounds: int = 10, frac: float = 0.8,
             seed: int = 0, predict: Optional[Callable] = None) -> EvalReport:
    """Bootstrap evaluation of a model (anything with ``predict_proba``) on samples."""
    if not samples:
        raise MetricError("nothing to evaluate")
    probs = (predict or model.predict_proba)(list(samples))
    labels = np.stack([s.label for s in samples])
    per_sample = per_sample_metrics(probs, labels, gamma)
    return bootstrap_report(per_sample, [s.group for s in samples], gamma, rounds, frac, seed)
