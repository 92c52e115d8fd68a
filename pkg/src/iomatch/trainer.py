"""Training loop for IOMatch and the two reference modes.

Modes:

* ``iomatch`` -- supervised, multi-binary, open-set and filtered inlier losses.
* ``fixmatch`` -- supervised loss plus confidence-thresholded hard pseudo-labels
  on the closed-set head; no multi-binary or open-set head training.
* ``supervised`` -- labeled cross-entropy only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import objectives as obj
from . import tensor as T
from .data import AugmentSpec, OpenSetDataset, augment, next_batch
from .evaluation import MetricsRecord, evaluate_test, utilization_rate
from .networks import (BACKBONE_PREFIXES, ConfigError, NetworkDims, NetworkParams, forward,
                       init_params)

logger = logging.getLogger(__name__)

MODES = ("iomatch", "fixmatch", "supervised")


class TrainingAborted(RuntimeError):
    """A loss became non-finite; the message carries batch diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "iomatch"
    batch_size: int = 16
    mu: int = 7
    tau_p: float = 0.95
    tau_q: float = 0.5
    lambda_mb: float = 1.0
    lambda_ui: float = 1.0
    lambda_op: float = 1.0
    epochs: int = 30
    iters_per_epoch: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine_decay: bool = True
    da_enabled: bool = False
    hard_labels: bool = False
    use_open_head_for_closed: bool = False
    seed: int = 0
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    dims: NetworkDims = field(default_factory=NetworkDims)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("tau_p", "tau_q"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("lambda_mb", "lambda_ui", "lambda_op", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_size", "mu", "epochs", "iters_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        self.augment.validate()
        self.dims.validate()

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class RunState:
    params: NetworkParams
    optimizer: T.SGD
    alignment: obj.AlignmentState
    batch_rng: np.random.Generator
    labeled_aug_rng: np.random.Generator
    unlabeled_aug_rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list[MetricsRecord] = field(default_factory=list)
    iteration_log: list[dict] = field(default_factory=list)
    best_params: NetworkParams | None = None
    best_epoch: int = -1
    best_metric: float = -math.inf


def init_state(config: TrainConfig, num_classes: int) -> RunState:
    config.validate()
    params = init_params(config.seed, config.dims, num_classes)
    params.zero_grad()
    optimizer = T.SGD(params.parameters(), lr=config.lr, momentum=config.momentum,
                      weight_decay=config.weight_decay)
    # independent streams keep batch sampling identical across modes
    seq = np.random.SeedSequence([config.seed, 0x10A7C4])
    b, la, ua = (np.random.default_rng(s) for s in seq.spawn(3))
    return RunState(params, optimizer, obj.AlignmentState.uniform(num_classes), b, la, ua)


def _check_finite(bd: obj.LossBreakdown, state: RunState, x_l, x_u) -> None:
    vals = bd.values()
    if all(math.isfinite(v) for v in vals.values()):
        return
    stats = {
        "labeled_abs_max": float(np.max(np.abs(x_l))) if x_l.size else 0.0,
        "unlabeled_abs_max": float(np.max(np.abs(x_u))) if x_u.size else 0.0,
        "param_abs_max": max(float(np.max(np.abs(t.data))) for t in state.params.parameters()),
    }
    raise TrainingAborted(f"non-finite loss at step {state.step} (epoch {state.epoch}): "
                          f"losses={vals} batch={stats}")


def compute_losses(state: RunState, x_l_weak, y_l, x_u_weak, x_u_strong,
                   config: TrainConfig) -> obj.LossBreakdown:
    """Build the training objective for one iteration on the active tape.

    The weak unlabeled view is evaluated off-tape since it only produces
    (detached) targets; the caller must have a tape active.
    """
    params = state.params
    zero = obj.zero_loss
    if config.mode == "supervised":
        out_l = forward(params, x_l_weak, heads="closed")
        return obj.overall_loss(obj.supervised_loss(out_l.p, y_l), zero(), zero(), zero(), 0, 0, 0)

    if config.mode == "fixmatch":
        out_l = forward(params, x_l_weak, heads="closed")
        l_s = obj.supervised_loss(out_l.p, y_l)
        with T.no_grad():
            p_w = forward(params, x_u_weak, heads="closed").p.data
        p_s = forward(params, x_u_strong, heads="closed").p
        l_u, n_sel = obj.consistency_loss(p_w, p_s, config.tau_p)
        return obj.overall_loss(l_s, zero(), l_u, zero(), 0.0, config.lambda_ui, 0.0,
                                n_selected_inliers=n_sel)

    # iomatch: features and predictions for labeled, weak and strong views
    out_l = forward(params, x_l_weak)
    with T.no_grad():
        out_w = forward(params, x_u_weak)
    out_s = forward(params, x_u_strong)
    l_s = obj.supervised_loss(out_l.p, y_l)
    l_mb = obj.multi_binary_loss(out_l.o, y_l)
    p_tilde = obj.distribution_align(out_w.p.data, state.alignment, enabled=config.da_enabled)
    target = obj.open_set_targets(p_tilde, out_w.o.data)
    l_op, n_open = obj.open_set_loss(target, out_s.q_open, config.tau_q)
    l_ui, n_in = obj.unlabeled_inlier_loss(target.p_tilde, target.S, out_s.p, config.tau_p,
                                           hard_labels=config.hard_labels)
    return obj.overall_loss(l_s, l_mb, l_ui, l_op, config.lambda_mb, config.lambda_ui,
                            config.lambda_op, n_selected_inliers=n_in, n_selected_open=n_open)


def train_iteration(state: RunState, labeled_batch, unlabeled_batch, config: TrainConfig,
                    total_steps: int | None = None) -> obj.LossBreakdown:
    """Augment, compute the objective, backpropagate and take one SGD step."""
    x_l, y_l = labeled_batch
    x_u = unlabeled_batch.x if hasattr(unlabeled_batch, "x") else np.asarray(unlabeled_batch)
    aug = config.augment
    x_l_weak = augment(x_l, aug, "weak", state.labeled_aug_rng)
    if config.mode == "supervised":
        x_u_weak = x_u_strong = None
    else:
        x_u_weak = augment(x_u, aug, "weak", state.unlabeled_aug_rng)
        x_u_strong = augment(x_u, aug, "strong", state.unlabeled_aug_rng)

    with T.Tape() as tape:
        bd = compute_losses(state, x_l_weak, y_l, x_u_weak, x_u_strong, config)
    _check_finite(bd, state, x_l, x_u)
    T.backward(bd.l_overall, tape)

    lr = config.lr
    if config.cosine_decay and total_steps:
        lr = T.cosine_lr(config.lr, state.step, total_steps)
    state.optimizer.step(lr)
    state.step += 1
    state.iteration_log.append({"step": state.step, **bd.values(),
                                "n_selected_inliers": bd.n_selected_inliers,
                                "n_selected_open": bd.n_selected_open})
    return bd


def pseudo_label_selection(params: NetworkParams, x_u, config: TrainConfig,
                           alignment: obj.AlignmentState | None = None):
    """Selected mask and pseudo-labels the current model assigns to ``x_u``.

    IOMatch selects rows whose fused target passes ``tau_q`` and labels them
    with its argmax (``K`` = outlier). FixMatch selects closed-set predictions
    above ``tau_p``. Supervised training selects nothing.
    """
    n = len(x_u)
    if config.mode == "supervised" or n == 0:
        return np.zeros(n, dtype=bool), np.zeros(n, dtype=np.int64)
    if config.mode == "fixmatch":
        p = forward(params, x_u, heads="closed").p.data
        return p.max(axis=1) > config.tau_p, T.row_argmax(p)
    out = forward(params, x_u)
    p_tilde = out.p.data
    if config.da_enabled and alignment is not None:
        p_tilde = obj.distribution_align(p_tilde, alignment, update=False)
    target = obj.open_set_targets(p_tilde, out.o.data)
    return obj.open_set_mask(target.q_tilde, config.tau_q), T.row_argmax(target.q_tilde)


def evaluate_epoch(state: RunState, dataset: OpenSetDataset, config: TrainConfig,
                   epoch_losses: dict[str, float], n_in: int, n_open: int) -> MetricsRecord:
    k = dataset.num_seen
    x_test, truth = dataset.test_set()
    closed_acc, open_ba, recall = evaluate_test(
        state.params, x_test, truth, k, open_head=config.mode == "iomatch",
        use_open_head_for_closed=config.use_open_head_for_closed)
    selected, pseudo = pseudo_label_selection(state.params, dataset.unlabeled_features(), config,
                                              state.alignment)
    util = utilization_rate(selected, pseudo, dataset.hidden_unlabeled_truth())
    return MetricsRecord(state.epoch, closed_acc, open_ba, recall, util, epoch_losses, n_in, n_open)


def train_run(dataset: OpenSetDataset, config: TrainConfig, on_epoch=None) -> RunState:
    """Train for ``epochs * iters_per_epoch`` steps, evaluating after each epoch."""
    config.validate()
    if dataset.input_dim != config.dims.input_dim:
        config = config.with_(dims=replace(config.dims, input_dim=dataset.input_dim))
    state = init_state(config, dataset.num_seen)
    total = config.epochs * config.iters_per_epoch
    keys = ("l_s", "l_mb", "l_ui", "l_op", "l_overall")
    for epoch in range(config.epochs):
        state.epoch = epoch
        sums = dict.fromkeys(keys, 0.0)
        n_in = n_open = 0
        for _ in range(config.iters_per_epoch):
            lab, unl = next_batch(dataset, config.batch_size, config.mu, state.batch_rng)
            bd = train_iteration(state, lab, unl, config, total)
            for key, v in bd.values().items():
                sums[key] += v
            n_in += bd.n_selected_inliers
            n_open += bd.n_selected_open
        means = {key: v / config.iters_per_epoch for key, v in sums.items()}
        record = evaluate_epoch(state, dataset, config, means, n_in, n_open)
        state.history.append(record)
        if record.closed_acc > state.best_metric:
            state.best_metric = record.closed_acc
            state.best_epoch = epoch
            state.best_params = state.params.copy()
        logger.info("%s seed=%d epoch=%d closed_acc=%.4f open_ba=%.4f util=%.4f",
                    config.mode, config.seed, epoch, record.closed_acc, record.open_ba,
                    record.util_rate)
        if on_epoch is not None:
            on_epoch(record)
    return state


def select_best_checkpoint(state: RunState):
    """Return ``(params, epoch, closed_acc)`` of the best epoch; ties go to the earliest."""
    if not state.history:
        raise T.TapeError("no completed epochs to select from")
    accs = [r.closed_acc for r in state.history]
    best = int(np.argmax(accs))
    params = state.best_params if state.best_epoch == best else None
    return params, best, accs[best]


def head_overhead(params: NetworkParams) -> float:
    """Fraction of extra parameters IOMatch carries over the closed-set-only network."""
    base = params.count(BACKBONE_PREFIXES)
    return (params.count() - base) / base
