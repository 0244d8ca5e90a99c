import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eimor.metrics import (
    UndefinedMetricError, aggregate, auc, average_precision, evaluate, harmonic_s2, s2,
)


def ap_oracle(scores, labels):
    """Precision@i at each positive, stable descending order, straight from the definition."""
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(idx, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / sum(labels)


def auc_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    acc = 0.0
    for p in pos:
        for n in neg:
            acc += 1.0 if p > n else 0.5 if p == n else 0.0
    return acc / (len(pos) * len(neg))


def test_worked_examples():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.5 * (1 + 2 / 3), abs=1e-12)
    assert auc([0.9, 0.8, 0.7], [1, 0, 1]) == 0.5


def test_edge_cases():
    assert average_precision([0.9, 0.1, 0.5], [1, 0, 1]) == 1.0
    assert average_precision([0.3, 0.2], [1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_s2_examples():
    assert harmonic_s2(1.0, 1.0) == 1.0
    assert harmonic_s2(1.0, 0.0) == 0.0
    assert harmonic_s2(0.0, 0.0) == 0.0
    assert harmonic_s2(0.8, 0.6) == pytest.approx(0.685714285714, abs=1e-9)
    # 4 of 5 positives caught, 3 of 5 negatives rejected
    assert s2([1, 1, 1, 1, 0, 1, 1, 0, 0, 0], [1] * 5 + [0] * 5) == pytest.approx(2 * 0.8 * 0.6 / 1.4)
    with pytest.raises(UndefinedMetricError):
        s2([1, 0], [1, 1])


def test_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[rng.integers(0, n)] = 1
        labels[(rng.integers(0, n) + 1) % n] = 0
        if labels.sum() in (0, n):
            continue
        # coarse rounding creates ties on purpose
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert abs(average_precision(scores, labels) - ap_oracle(list(scores), list(labels))) <= 1e-9
        assert abs(auc(scores, labels) - auc_oracle(list(scores), list(labels))) <= 1e-9


@settings(max_examples=80, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**32 - 1))
def test_monotone_transform_and_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    scores = rng.permutation(n) + rng.random(n) * 0.5
    labels = np.zeros(n, dtype=int)
    labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
    ap, a = average_precision(scores, labels), auc(scores, labels)
    mono = np.exp(scores / 10) * 3 + 1
    assert average_precision(mono, labels) == pytest.approx(ap, abs=1e-12)
    assert auc(mono, labels) == pytest.approx(a, abs=1e-12)
    perm = rng.permutation(n)
    assert average_precision(scores[perm], labels[perm]) == pytest.approx(ap, abs=1e-12)
    assert auc(scores[perm], labels[perm]) == pytest.approx(a, abs=1e-12)
    assert 0.0 <= ap <= 1.0 and 0.0 <= a <= 1.0


def test_aggregate_macro_means():
    rep = aggregate([{"ap": 0.8, "auc": 0.9, "s2": 0.5}, {"ap": 0.6, "auc": 0.7, "s2": 0.3}])
    assert rep.macro["map"] == pytest.approx(0.7)
    single = aggregate([{"ap": 0.4, "auc": 0.6, "s2": 0.2}])
    assert single.macro == {"map": 0.4, "mauc": 0.6, "ms2": 0.2}
    skipped = aggregate([{"ap": 0.8, "auc": 0.9, "s2": 0.5}, {"ap": None, "auc": None, "s2": None}])
    assert skipped.macro["map"] == 0.8


def test_evaluate_skips_class_without_positives_and_json_key_order():
    probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.8, 0.1]])
    labels = np.eye(3)[[0, 1, 0, 1]]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = evaluate(probs, labels)
    assert any("no positives" in str(w.message) for w in caught)
    assert rep.counts["skipped"] == [2]
    assert rep.macro["map"] == 1.0
    decoded = json.loads(rep.to_json())
    assert list(decoded) == ["per_class", "macro", "counts"]
    assert list(decoded["macro"]) == ["map", "mauc", "ms2"]


def test_multilabel_decisions_use_half_threshold():
    probs = np.array([[0.6, 0.4], [0.4, 0.6], [0.7, 0.7], [0.2, 0.1]])
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    rep = evaluate(probs, labels, multilabel=True)
    assert all(c["s2"] == 1.0 for c in rep.per_class)
