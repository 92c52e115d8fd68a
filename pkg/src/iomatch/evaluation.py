"""Inference rules and metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .networks import NetworkParams, forward


@dataclass
class MetricsRecord:
    epoch: int
    closed_acc: float
    open_ba: float
    per_class_recall: list[float]
    util_rate: float
    losses: dict[str, float] = field(default_factory=dict)
    n_selected_inliers: int = 0
    n_selected_open: int = 0


def predict_closed(params: NetworkParams, x, use_open_head: bool = False) -> np.ndarray:
    """Seen-class prediction from the closed-set head (lowest index wins ties).

    ``use_open_head`` predicts from the open-set head with its outlier column
    dropped instead.
    """
    if use_open_head:
        q = forward(params, x).q_open.data
        return kernels.row_argmax(q[:, :-1])
    return kernels.row_argmax(forward(params, x, heads="closed").p.data)


def predict_open(params: NetworkParams, x) -> np.ndarray:
    """(K+1)-way prediction from the open-set head; ``K`` means outlier."""
    return kernels.row_argmax(forward(params, x).q_open.data)


def per_class_recall(pred, truth, n_classes: int) -> np.ndarray:
    """Recall per class; NaN for classes absent from ``truth``."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    counts = np.bincount(truth, minlength=n_classes)[:n_classes].astype(np.float64)
    hits = np.bincount(truth[pred == truth], minlength=n_classes)[:n_classes].astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, hits / np.where(counts > 0, counts, 1.0), np.nan)


def balanced_accuracy(pred, truth, n_classes: int) -> float:
    """Mean per-class recall. Classes missing from ``truth`` are skipped with a warning."""
    recall = per_class_recall(pred, truth, n_classes)
    present = ~np.isnan(recall)
    if not present.all():
        missing = np.flatnonzero(~present).tolist()
        warnings.warn(f"classes {missing} absent from truth; excluded from balanced accuracy",
                      stacklevel=2)
    if not present.any():
        return 0.0
    return float(recall[present].mean())


def closed_accuracy(pred, truth) -> float:
    truth = np.asarray(truth)
    if truth.size == 0:
        return 0.0
    return float(np.mean(np.asarray(pred) == truth))


def utilization_rate(selected_mask, pseudo_labels, hidden_truth, n_unlabeled: int | None = None) -> float:
    """Selected-and-correct pseudo-labels over all unlabeled samples.

    Rows with unknown truth (``-1``) never count as correct. When
    ``n_unlabeled`` is omitted the denominator is the number of rows with
    known truth.
    """
    selected = np.asarray(selected_mask, dtype=bool)
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    truth = np.asarray(hidden_truth, dtype=np.int64)
    if n_unlabeled is None:
        n_unlabeled = int(np.sum(truth >= 0))
    if n_unlabeled == 0:
        return 0.0
    correct = selected & (pseudo == truth) & (truth >= 0)
    return float(correct.sum()) / n_unlabeled


def evaluate_test(params: NetworkParams, x_test, open_truth, num_classes: int,
                  open_head: bool = True, use_open_head_for_closed: bool = False):
    """Closed-set accuracy on seen-class rows and open-set balanced accuracy.

    ``open_truth`` uses ``K`` for unseen classes. Without a trained open head
    (``open_head=False``) the closed-set prediction stands in for the open-set
    one, so the outlier class is never predicted.
    """
    open_truth = np.asarray(open_truth, dtype=np.int64)
    known = open_truth >= 0
    x_test = np.asarray(x_test)[known]
    open_truth = open_truth[known]
    seen = open_truth < num_classes
    closed_pred = predict_closed(params, x_test, use_open_head_for_closed)
    closed_acc = closed_accuracy(closed_pred[seen], open_truth[seen])
    open_pred = predict_open(params, x_test) if open_head else closed_pred
    recall = per_class_recall(open_pred, open_truth, num_classes + 1)
    present = ~np.isnan(recall)
    open_ba = float(recall[present].mean()) if present.any() else 0.0
    return closed_acc, open_ba, np.nan_to_num(recall, nan=0.0).tolist()
