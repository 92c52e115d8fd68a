"""Finite-difference verification of every training loss.

Each case builds a small random network and batch (``B=4``, ``mu=2``), freezes
the pseudo-label targets, and compares tape gradients against central
differences over all parameters. Targets are frozen because the losses treat
them as constants; their own sensitivity is deliberately not differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import objectives as obj
from . import tensor as T
from .networks import NetworkDims, forward, init_params

TOLERANCE = 1e-4
EPS = 1e-5
SMALL_DIMS = NetworkDims(input_dim=5, hidden=(6,), feature_dim=6, proj_hidden=5, proj_dim=4)


@dataclass
class GradCheckResult:
    loss: str
    num_classes: int
    seed: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _case(num_classes: int, seed: int, batch_size: int = 4, mu: int = 2):
    rng = np.random.default_rng(seed)
    params = init_params(seed, SMALL_DIMS, num_classes)
    # zero biases put dead-unit rows exactly on a relu kink; nudge them off
    for name, t in params.tensors.items():
        if name.endswith(".b"):
            t.data[:] = rng.normal(scale=0.1, size=t.shape)
    x_l = rng.normal(size=(batch_size, SMALL_DIMS.input_dim))
    y_l = rng.integers(0, num_classes, size=batch_size)
    x_s = rng.normal(size=(mu * batch_size, SMALL_DIMS.input_dim))
    # frozen targets: confident enough that the inlier filter selects rows
    p_tilde = rng.dirichlet(np.full(num_classes, 0.3), size=mu * batch_size)
    o_w = rng.uniform(0.05, 0.95, size=(mu * batch_size, num_classes))
    o_w[: batch_size] = rng.uniform(0.6, 0.95, size=(batch_size, num_classes))
    target = obj.open_set_targets(p_tilde, o_w)
    return params, x_l, y_l, x_s, target


def loss_builders(num_classes: int, seed: int):
    """Return ``(params, {name: zero-arg loss closure})`` for one random case."""
    params, x_l, y_l, x_s, target = _case(num_classes, seed)
    weights = np.random.default_rng(seed + 1).uniform(0.25, 2.0, size=3)

    def l_s():
        return obj.supervised_loss(forward(params, x_l).p, y_l)

    def l_mb():
        return obj.multi_binary_loss(forward(params, x_l).o, y_l)

    def l_op():
        return obj.open_set_loss(target, forward(params, x_s).q_open, 0.0)[0]

    def l_ui():
        return obj.unlabeled_inlier_loss(target.p_tilde, target.S, forward(params, x_s).p, 0.0)[0]

    def l_ui_hard():
        return obj.unlabeled_inlier_loss(target.p_tilde, target.S, forward(params, x_s).p, 0.0,
                                         hard_labels=True)[0]

    def l_fixmatch():
        return obj.consistency_loss(target.p_tilde, forward(params, x_s).p, 0.0)[0]

    def l_overall():
        return obj.overall_loss(l_s(), l_mb(), l_ui(), l_op(), *weights).l_overall

    return params, {
        "supervised": l_s,
        "multi_binary": l_mb,
        "open_set": l_op,
        "unlabeled_inlier": l_ui,
        "unlabeled_inlier_hard": l_ui_hard,
        "fixmatch_consistency": l_fixmatch,
        "overall": l_overall,
    }


def run_gradcheck(class_counts=(2, 3, 5), seeds=(0, 1, 2)) -> list[GradCheckResult]:
    results = []
    for k in class_counts:
        for seed in seeds:
            names = loss_builders(k, seed)[1].keys()
            for name in names:
                # fresh parameters per loss so earlier checks cannot leak state
                params, builders = loss_builders(k, seed)
                err = T.finite_difference_check(builders[name], params.parameters(), eps=EPS)
                results.append(GradCheckResult(name, k, seed, err))
    return results
