"""Evaluation metrics: accuracy, RMSE, exact pair-counting ROC-AUC, HITS@N."""

import numpy as np


def accuracy(predicted, labels):
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(predicted == labels))


def rmse(predicted, targets):
    predicted = np.asarray(predicted, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return float(np.sqrt(np.mean((predicted - targets) ** 2)))


def roc_auc(scores, labels):
    """Probability a random positive outranks a random negative (ties count 0.5).

    Computed by exact pair counting; dense but exact at desk scale.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC-AUC undefined: test set has a single class")
    cmp = pos[:, None] - neg[None, :]
    wins = (cmp > 0).sum() + 0.5 * (cmp == 0).sum()
    return float(wins / (pos.size * neg.size))


def hits_at_n(pos_scores, neg_scores, n):
    """Fraction of positives scored strictly above the n-th best negative."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0:
        raise ValueError("HITS@N undefined without positive pairs")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if neg.size < n:
        return 1.0
    threshold = np.sort(neg)[-n]
    return float(np.mean(pos > threshold))


def utilization_entropy(mean_weights):
    """Shannon entropy (nats) of the normalized per-expert mean gate weight."""
    w = np.asarray(mean_weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return 0.0
    p = w / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
