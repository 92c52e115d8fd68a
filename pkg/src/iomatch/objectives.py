"""Loss functions, open-set target fusion and distribution alignment.

Pseudo-label targets (the aligned closed-set prediction ``p_tilde`` and the
fused ``q_tilde``) are plain constants: no gradient flows back through them.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .networks import ConfigError
from .tensor import Tensor

OUTLIER_SCORE_CUT = 0.5
DA_HISTORY = 128
DA_FLOOR = 1e-8


class LabelError(ValueError):
    """A label index is outside ``[0, K)``."""


def _labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        bad = y[(y < 0) | (y >= num_classes)][0]
        raise LabelError(f"label {bad} outside [0, {num_classes})")
    return y


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def soft_cross_entropy_rows(target: np.ndarray, pred: Tensor) -> Tensor:
    """Per-row ``-sum_k target_k * log pred_k`` as an ``m x 1`` column."""
    return T.neg(T.row_sum(T.mul(Tensor._wrap(np.ascontiguousarray(target)), T.log(pred))))


def supervised_loss(p: Tensor, y) -> Tensor:
    """Mean cross-entropy of the closed-set probabilities against hard labels."""
    y = _labels(y, p.cols)
    return T.neg(T.mean(T.log(T.gather(p, y))))


def multi_binary_loss(o: Tensor, y) -> Tensor:
    """One-vs-all loss with hard-negative sampling.

    For each labeled row: ``-log o[y] - min_{k != y} log(1 - o[k])``. The
    minimum picks the negative class the head is most confused about.
    """
    if o.cols < 2:
        raise ConfigError("multi-binary loss needs K >= 2 (no negative class otherwise)")
    y = _labels(y, o.cols)
    hard = kernels.hard_negative_index(o.data, y)
    pos = T.log(T.gather(o, y))
    negative = T.log(T.gather(T.add_scalar(T.neg(o), 1.0), hard))
    return T.neg(T.mean(T.add(pos, negative)))


# ---------------------------------------------------------------------------
# distribution alignment


@dataclass
class AlignmentState:
    """Running statistics for distribution alignment.

    ``history`` holds one mean prediction vector per unlabeled batch, newest
    last, capped at ``capacity``. Until the first update ``p_avg`` equals
    ``p_mrgl``, so alignment starts as the identity.
    """

    p_mrgl: np.ndarray
    capacity: int = DA_HISTORY
    history: deque = field(default_factory=deque)

    @classmethod
    def uniform(cls, num_classes: int, capacity: int = DA_HISTORY) -> "AlignmentState":
        return cls(np.full(num_classes, 1.0 / num_classes), capacity)

    @property
    def p_avg(self) -> np.ndarray:
        if not self.history:
            return self.p_mrgl.copy()
        avg = np.mean(np.stack(self.history), axis=0)
        return avg / avg.sum()

    def update(self, batch_mean: np.ndarray) -> None:
        self.history.append(np.asarray(batch_mean, dtype=np.float64).copy())
        while len(self.history) > self.capacity:
            self.history.popleft()

    def copy(self) -> "AlignmentState":
        return AlignmentState(self.p_mrgl.copy(), self.capacity, deque(h.copy() for h in self.history))


def align_predictions(p_w: np.ndarray, p_mrgl: np.ndarray, p_avg: np.ndarray) -> np.ndarray:
    scaled = p_w * (p_mrgl / np.maximum(p_avg, DA_FLOOR))
    return scaled / scaled.sum(axis=1, keepdims=True)


def distribution_align(p_w, state: AlignmentState, enabled: bool = True,
                       update: bool = True) -> np.ndarray:
    """Rescale weak-view predictions by ``p_mrgl / p_avg`` and renormalize.

    The state absorbs this batch's mean prediction afterwards (all rows,
    masked or not). With ``enabled=False`` the input passes through and the
    state is left alone.
    """
    p_w = _const(p_w)
    if not enabled:
        return p_w.copy()
    out = align_predictions(p_w, state.p_mrgl, state.p_avg)
    if update and p_w.shape[0]:
        state.update(p_w.mean(axis=0))
    return out


# ---------------------------------------------------------------------------
# open-set targets and unlabeled losses


@dataclass
class OpenSetTarget:
    q_tilde: Tensor
    S: Tensor
    p_tilde: Tensor

    @property
    def num_classes(self) -> int:
        return self.p_tilde.cols


def open_set_targets(p_tilde, o_w) -> OpenSetTarget:
    """Fuse closed-set and one-vs-all predictions into a (K+1)-way target.

    ``q[k] = p_tilde[k] * o[k]`` for seen classes and the last column holds the
    unseen score ``S = sum_j p_tilde[j] * (1 - o[j])``.
    """
    p = _const(p_tilde)
    o = _const(o_w)
    if p.shape != o.shape:
        raise T.ShapeError(f"p_tilde {p.shape} and o {o.shape} differ")
    q = kernels.fuse_open_targets(p, o)
    k = p.shape[1]
    return OpenSetTarget(Tensor._wrap(q), Tensor._wrap(q[:, k:k + 1].copy()),
                         Tensor._wrap(np.ascontiguousarray(p)))


def open_set_mask(q_tilde, tau_q: float) -> np.ndarray:
    return _const(q_tilde).max(axis=1) > tau_q


def open_set_loss(target: OpenSetTarget, q_s: Tensor, tau_q: float) -> tuple[Tensor, int]:
    """Masked soft cross-entropy between fused targets and strong-view open-head output."""
    mask = open_set_mask(target.q_tilde, tau_q)
    per_row = soft_cross_entropy_rows(target.q_tilde.data, q_s)
    loss = T.mean(T.mul(per_row, Tensor._wrap(mask.astype(np.float64).reshape(-1, 1))))
    return loss, int(mask.sum())


def inlier_filter(p_tilde_row, S: float, tau_p: float) -> int:
    """1 when the row is confident (max > tau_p) and not a likely outlier (S < 0.5)."""
    return int(float(np.max(p_tilde_row)) > tau_p and float(S) < OUTLIER_SCORE_CUT)


def inlier_mask(p_tilde, S, tau_p: float) -> np.ndarray:
    p = _const(p_tilde)
    s = _const(S).reshape(-1)
    return (p.max(axis=1) > tau_p) & (s < OUTLIER_SCORE_CUT)


def unlabeled_inlier_loss(p_tilde, S, p_s: Tensor, tau_p: float,
                          hard_labels: bool = False) -> tuple[Tensor, int]:
    """Double-filtered pseudo-label loss on the closed-set head.

    The target is the soft ``p_tilde`` row, or its one-hot argmax when
    ``hard_labels`` is set.
    """
    p = _const(p_tilde)
    mask = inlier_mask(p, S, tau_p)
    target = T.one_hot(kernels.row_argmax(p), p.shape[1]).data if hard_labels else p
    per_row = soft_cross_entropy_rows(target, p_s)
    loss = T.mean(T.mul(per_row, Tensor._wrap(mask.astype(np.float64).reshape(-1, 1))))
    return loss, int(mask.sum())


def consistency_loss(p_w, p_s: Tensor, tau: float) -> tuple[Tensor, int]:
    """Confidence-masked hard pseudo-label loss (the FixMatch baseline)."""
    p = _const(p_w)
    mask = p.max(axis=1) > tau
    target = T.one_hot(kernels.row_argmax(p), p.shape[1]).data
    per_row = soft_cross_entropy_rows(target, p_s)
    loss = T.mean(T.mul(per_row, Tensor._wrap(mask.astype(np.float64).reshape(-1, 1))))
    return loss, int(mask.sum())


@dataclass
class LossBreakdown:
    l_s: Tensor
    l_mb: Tensor
    l_ui: Tensor
    l_op: Tensor
    l_overall: Tensor
    n_selected_inliers: int = 0
    n_selected_open: int = 0

    def values(self) -> dict[str, float]:
        return {
            "l_s": self.l_s.item(),
            "l_mb": self.l_mb.item(),
            "l_ui": self.l_ui.item(),
            "l_op": self.l_op.item(),
            "l_overall": self.l_overall.item(),
        }


def zero_loss() -> Tensor:
    return Tensor._wrap(np.zeros((1, 1)))


def overall_loss(l_s: Tensor, l_mb: Tensor, l_ui: Tensor, l_op: Tensor,
                 lambda_mb: float = 1.0, lambda_ui: float = 1.0, lambda_op: float = 1.0,
                 n_selected_inliers: int = 0, n_selected_open: int = 0) -> LossBreakdown:
    """``l_s + lambda_mb*l_mb + lambda_ui*l_ui + lambda_op*l_op``.

    A zero weight drops its term from the graph entirely, so the remaining
    gradient is bit-for-bit the one of the reduced objective.
    """
    for name, w in (("lambda_mb", lambda_mb), ("lambda_ui", lambda_ui), ("lambda_op", lambda_op)):
        if w < 0:
            raise ConfigError(f"{name} must be >= 0, got {w}")
    total = l_s
    for term, w in ((l_mb, lambda_mb), (l_ui, lambda_ui), (l_op, lambda_op)):
        if w:
            total = T.add(total, T.scale(term, w))
    return LossBreakdown(l_s, l_mb, l_ui, l_op, total, n_selected_inliers, n_selected_open)
