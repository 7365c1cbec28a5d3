import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medrec_kd.metrics import (EvalReport, GroupResult, MetricError, bootstrap_report, evaluate,
                               f1, jaccard, mean_prauc, per_sample_metrics, prauc)

GOLDEN_TABLE = Path(__file__).parent / "fixtures" / "eval_table_golden.txt"


def brute_jaccard(pred, true):
    inter = sum(1 for k in pred if k in true)
    union = len(pred) + len(true) - inter
    return inter / union


def brute_f1(pred, true):
    inter = sum(1 for k in pred if k in true)
    if inter == 0:
        return 0.0
    p, r = inter / len(pred), inter / len(true)
    return 2 * p * r / (p + r)


def brute_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    hits, total = 0, 0.0
    for rank, k in enumerate(order, 1):
        if labels[k]:
            hits += 1
            total += hits / rank
    return total / hits


def random_instance(rng):
    m = int(rng.integers(1, 9))
    labels = [0] * m
    for k in rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False):
        labels[k] = 1
    # coarse scores so that ties actually occur
    scores = (rng.integers(0, 5, size=m) / 4.0).tolist()
    return scores, labels


def test_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        scores, labels = random_instance(rng)
        gamma = float(rng.choice([0.25, 0.5, 0.6]))
        pred = {k for k, s in enumerate(scores) if s > gamma}
        true = {k for k, y in enumerate(labels) if y}
        assert jaccard(pred, true) == brute_jaccard(pred, true)
        assert f1(pred, true) == brute_f1(pred, true)
        assert abs(prauc(scores, labels) - brute_ap(scores, labels)) <= 1e-12


def test_metric_examples():
    assert jaccard({0, 1}, {1, 2}) == pytest.approx(1 / 3)
    assert f1(set(), {1}) == 0.0
    assert prauc([0.9, 0.1, 0.8], [1, 0, 1]) == 1.0
    assert prauc([0.1, 0.9], [1, 0]) == pytest.approx(0.5)
    # tie between ids 0 and 1: the lower id ranks first
    assert prauc([0.5, 0.5], [0, 1]) == pytest.approx(0.5)


def test_metric_errors():
    with pytest.raises(MetricError):
        jaccard({1}, set())
    with pytest.raises(MetricError):
        prauc([0.3, 0.2], [0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.data())
def test_prauc_bounds_and_perfect_ranking(scores, data):
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores))
                       .filter(lambda l: any(l)))
    ap = prauc(scores, labels)
    assert 0.0 < ap <= 1.0
    assert prauc(labels, labels) == 1.0


def per_sample_fixture(n=40, seed=0):
    rng = np.random.default_rng(seed)
    per = rng.random((n, 3))
    groups = ["single" if i % 4 == 0 else "multi" for i in range(n)]
    return per, groups


def test_bootstrap_full_single_round_equals_direct():
    per, groups = per_sample_fixture()
    rep = bootstrap_report(per, groups, 0.5, rounds=1, frac=1.0, seed=3)
    g = np.array(groups)
    for name, mask in (("overall", np.ones(len(g), bool)), ("multi", g == "multi"),
                       ("single", g == "single")):
        direct = per[mask].mean(axis=0)
        assert [rep.groups[name].mean[m] for m in ("prauc", "jaccard", "f1")] == pytest.approx(
            direct.tolist(), abs=1e-15)
        assert all(v == 0.0 for v in rep.groups[name].std.values())


def test_bootstrap_std_positive_and_reproducible():
    per, groups = per_sample_fixture()
    a = bootstrap_report(per, groups, 0.5, rounds=10, frac=0.8, seed=1)
    b = bootstrap_report(per, groups, 0.5, rounds=10, frac=0.8, seed=1)
    assert a.to_json() == b.to_json()
    assert all(v > 0 for v in a.groups["overall"].std.values())
    c = bootstrap_report(per, groups, 0.5, rounds=10, frac=0.8, seed=2)
    assert c.to_json() != a.to_json()


def test_bootstrap_draw_size_and_shared_indices():
    per = np.arange(10.0)[:, None].repeat(3, axis=1)
    groups = ["multi"] * 5 + ["single"] * 5
    rep = bootstrap_report(per, groups, 0.5, rounds=1, frac=0.55, seed=0)
    # ceil(0.55 * 10) = 6 draws without replacement, shared across groups
    idx = np.sort(np.random.default_rng(0).choice(10, size=math.ceil(5.5), replace=False))
    assert rep.groups["overall"].mean["prauc"] == pytest.approx(idx.mean())
    assert rep.groups["multi"].mean["prauc"] == pytest.approx(idx[idx < 5].mean())
    assert rep.groups["single"].mean["prauc"] == pytest.approx(idx[idx >= 5].mean())


def test_bootstrap_argument_checks():
    per, groups = per_sample_fixture()
    with pytest.raises(ValueError):
        bootstrap_report(per, groups, 0.5, rounds=0)
    with pytest.raises(ValueError):
        bootstrap_report(per, groups, 0.5, frac=0.0)
    with pytest.raises(MetricError):
        bootstrap_report(per[:0], [], 0.5)


def test_missing_group_omitted():
    per, _ = per_sample_fixture(10)
    rep = bootstrap_report(per, ["multi"] * 10, 0.5, rounds=2)
    assert set(rep.groups) == {"overall", "multi"}
    assert "Single-visit       0  -" in rep.format_table()


def test_table_golden_layout():
    rep = EvalReport(groups={
        "overall": GroupResult(30, {"prauc": 0.61234, "jaccard": 0.4, "f1": 0.55555},
                               {"prauc": 0.01, "jaccard": 0.002, "f1": 0.0123456}),
        "multi": GroupResult(20, {"prauc": 0.6, "jaccard": 0.41, "f1": 0.56},
                             {"prauc": 0.011, "jaccard": 0.003, "f1": 0.013}),
        "single": GroupResult(10, {"prauc": 0.64, "jaccard": 0.38, "f1": 0.54},
                              {"prauc": 0.02, "jaccard": 0.004, "f1": 0.014})},
        gamma=0.5, seed=0, rounds=10, frac=0.8)
    assert rep.format_table() == GOLDEN_TABLE.read_text(encoding="utf-8")


def test_per_sample_metrics_threshold():
    probs = np.array([[0.9, 0.2, 0.6], [0.5, 0.5, 0.1]])
    labels = np.array([[1, 0, 0], [0, 1, 0]])
    out = per_sample_metrics(probs, labels, 0.5)
    assert out[0].tolist() == pytest.approx([1.0, 0.5, 2 / 3])
    assert out[1].tolist() == pytest.approx([0.5, 0.0, 0.0])


class _Fixed:
    def __init__(self, probs):
        self.probs = probs

    def predict_proba(self, samples):
        return self.probs


def test_evaluate_reports_all_groups(tiny_samples):
    probs = np.random.default_rng(0).random((len(tiny_samples), 5))
    rep = evaluate(_Fixed(probs), tiny_samples, rounds=1, frac=1.0)
    assert set(rep.groups) == {"overall", "multi", "single"}
    labels = np.stack([s.label for s in tiny_samples])
    assert rep.groups["overall"].mean["prauc"] == pytest.approx(mean_prauc(probs, labels), abs=1e-15)
    assert rep.groups["single"].n_samples == sum(s.is_single_visit for s in tiny_samples)
