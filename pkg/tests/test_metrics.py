import numpy as np
import pytest

from damoe import metrics as mt


def test_accuracy_perfect():
    assert mt.accuracy([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0


def test_rmse_perfect():
    assert mt.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0


def brute_force_auc(scores, labels):
    """Exhaustive O(P·N) pair count with explicit loops (the oracle)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def test_auc_separable():
    scores = [0.9, 0.8, 0.7, 0.1]
    labels = [1, 1, 0, 0]
    assert mt.roc_auc(scores, labels) == 1.0


def test_auc_half():
    scores = [0.9, 0.1, 0.8, 0.2]
    labels = [1, 1, 0, 0]
    assert mt.roc_auc(scores, labels) == 0.5  # 2 of 4 pairs won


def test_auc_matches_brute_force_exactly(rng):
    for _ in range(30):
        n = int(rng.integers(4, 40))
        scores = rng.choice(np.linspace(0, 1, 7), size=n)  # force ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert mt.roc_auc(scores, labels) == brute_force_auc(scores, labels)


def test_auc_single_class_undefined():
    with pytest.raises(ValueError, match="single class"):
        mt.roc_auc([0.1, 0.9], [1, 1])


def test_hits_boundary_negative_above_all():
    assert mt.hits_at_n([0.5, 0.4], [0.9], 1) == 0.0


def test_hits_counts_strictly_above_threshold():
    # threshold is the 2nd best negative (0.6)
    assert mt.hits_at_n([0.9, 0.7, 0.6, 0.1], [0.8, 0.6, 0.2], 2) == 0.5


def test_hits_fewer_negatives_than_n():
    assert mt.hits_at_n([0.1], [0.9], 5) == 1.0


def test_utilization_entropy():
    assert mt.utilization_entropy([0.25, 0.25, 0.25, 0.25]) == pytest.approx(np.log(4))
    assert mt.utilization_entropy([1.0, 0.0, 0.0, 0.0]) == 0.0
    uniform = mt.utilization_entropy([0.2, 0.2, 0.2, 0.2])
    skewed = mt.utilization_entropy([0.7, 0.1, 0.05, 0.05])
    assert uniform > skewed
