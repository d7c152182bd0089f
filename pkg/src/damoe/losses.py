"""Task losses and the two balancing losses that keep expert routing spread.

Both balancing terms are the squared coefficient of variation of a
per-expert batch aggregate: summed gate weights for the importance loss,
summed selection probabilities for the load loss. Either is zero exactly
when its aggregate is uniform across experts.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import (TASK_GRAPH_CLASSIFICATION, TASK_GRAPH_REGRESSION,
                     TASK_LINK_PREDICTION, TASK_NODE_CLASSIFICATION)

CV_EPS = 1e-10


def coefficient_of_variation_sq(values):
    """Population Var(S) / (mean(S)² + eps) as a differentiable scalar."""
    s = ad._coerce(values)
    mean = ad.mean_all(s)
    centered = ad.sub(s, mean)
    variance = ad.mean_all(ad.mul(centered, centered))
    return ad.div(variance, ad.add(ad.mul(mean, mean), CV_EPS))


def _sum_rows_over_batch(batch_rows):
    if not batch_rows:
        raise ValueError("balancing losses need a non-empty batch")
    total = None
    for rows in batch_rows:
        contrib = ad.sum_pool_rows(rows) if rows.data.shape[0] > 1 else rows
        total = contrib if total is None else ad.add(total, contrib)
    return total


def importance_loss(batch_weights):
    """CV² of per-expert summed gate weights over the batch."""
    return coefficient_of_variation_sq(_sum_rows_over_batch(batch_weights))


def load_loss(batch_select_probs):
    """CV² of per-expert summed selection probabilities over the batch."""
    return coefficient_of_variation_sq(_sum_rows_over_batch(batch_select_probs))


def task_loss(pred, target, task):
    """Cross-entropy for classification, MSE for regression, BCE for links."""
    if task == TASK_GRAPH_CLASSIFICATION:
        return ad.cross_entropy_logits(pred, np.atleast_1d(target))
    if task == TASK_NODE_CLASSIFICATION:
        labels = np.asarray(target, dtype=np.int64)
        mask = labels >= 0
        return ad.cross_entropy_logits(pred, np.where(mask, labels, 0), mask=mask)
    if task == TASK_GRAPH_REGRESSION:
        diff = ad.sub(pred, ad.constant(np.asarray(target, dtype=np.float64).reshape(pred.data.shape)))
        return ad.mean_all(ad.mul(diff, diff))
    if task == TASK_LINK_PREDICTION:
        return ad.bce_with_logits(pred, target)
    raise ValueError(f"unknown task {task!r}")


@dataclass
class LossBreakdown:
    task_loss: float
    importance_loss: float
    load_loss: float
    total: float
    lambda_importance: float
    lambda_load: float
    total_node: ad.TensorNode = None

    def as_row(self):
        return {
            "task_loss": self.task_loss,
            "importance_loss": self.importance_loss,
            "load_loss": self.load_loss,
            "total": self.total,
        }


def total_loss(task_term, importance_term, load_term, lambda_importance, lambda_load):
    """Combine the three terms: task + λ1·importance + λ2·load."""
    total = ad.add(task_term,
                   ad.add(ad.mul(importance_term, lambda_importance),
                          ad.mul(load_term, lambda_load)))
    return LossBreakdown(
        task_loss=float(task_term.data[0, 0]),
        importance_loss=float(importance_term.data[0, 0]),
        load_loss=float(load_term.data[0, 0]),
        total=float(total.data[0, 0]),
        lambda_importance=lambda_importance,
        lambda_load=lambda_load,
        total_node=total,
    )
