import math

import numpy as np
import pytest

from iomatch.data import make_gaussian_mixture_task, next_batch
from iomatch.evaluation import MetricsRecord
from iomatch.networks import ConfigError, NetworkDims
from iomatch.tensor import TapeError
from iomatch.trainer import (TrainConfig, TrainingAborted, head_overhead, init_state,
                             select_best_checkpoint, train_iteration, train_run)

SMALL = NetworkDims(hidden=(24,), feature_dim=12, proj_hidden=8, proj_dim=4)


@pytest.fixture(scope="module")
def task():
    return make_gaussian_mixture_task(seed=0, n_per_class=60)


def quick(mode="iomatch", **kw):
    base = dict(mode=mode, epochs=2, iters_per_epoch=4, batch_size=8, mu=2, dims=SMALL)
    base.update(kw)
    return TrainConfig(**base)


def one_iteration(task, config):
    state = init_state(config, task.num_seen)
    lab, unl = next_batch(task, config.batch_size, config.mu, state.batch_rng)
    return state, train_iteration(state, lab, unl, config, total_steps=10)


def test_defaults_match_reference_hyperparameters():
    c = TrainConfig()
    assert (c.lambda_mb, c.lambda_ui, c.lambda_op) == (1.0, 1.0, 1.0)
    assert (c.tau_p, c.tau_q, c.mu) == (0.95, 0.5, 7)
    assert (c.lr, c.momentum, c.cosine_decay) == (0.01, 0.9, True)


@pytest.mark.parametrize("change", [dict(tau_p=1.5), dict(tau_q=-0.1), dict(lambda_op=-1.0),
                                    dict(mode="mixmatch"), dict(batch_size=0), dict(lr=0.0)])
def test_invalid_config(change):
    with pytest.raises(ConfigError):
        TrainConfig(**change).validate()


def test_supervised_breakdown_has_zero_aux_terms(task):
    _, bd = one_iteration(task, quick("supervised"))
    v = bd.values()
    assert v["l_mb"] == v["l_ui"] == v["l_op"] == 0.0
    assert v["l_overall"] == v["l_s"]


def test_unit_weights_sum(task):
    _, bd = one_iteration(task, quick(tau_p=0.0, tau_q=0.0))
    v = bd.values()
    assert v["l_overall"] == pytest.approx(v["l_s"] + v["l_mb"] + v["l_ui"] + v["l_op"],
                                           rel=1e-14)
    assert v["l_op"] > 0 and v["l_ui"] > 0


def test_iteration_deterministic(task):
    _, a = one_iteration(task, quick())
    _, b = one_iteration(task, quick())
    assert a.values() == b.values()


def test_single_step(task):
    state = train_run(task, quick(epochs=1, iters_per_epoch=1))
    assert state.step == 1 and len(state.history) == 1


def test_zero_weights_match_supervised(task):
    io = train_run(task, quick(lambda_mb=0.0, lambda_ui=0.0, lambda_op=0.0, epochs=1,
                               iters_per_epoch=10))
    sup = train_run(task, quick("supervised", epochs=1, iters_per_epoch=10))
    assert [r["l_s"] for r in io.iteration_log] == [r["l_s"] for r in sup.iteration_log]


def test_hidden_labels_do_not_leak(task):
    rng = np.random.default_rng(0)
    truth = task.labels[task.unlabeled_idx]
    shuffled = task.with_unlabeled_labels(rng.permutation(truth))
    a = train_run(task, quick())
    b = train_run(shuffled, quick())
    assert a.iteration_log == b.iteration_log
    for name in a.params.tensors:
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_history_finite_and_best_dominates(task):
    state = train_run(task, quick(epochs=3))
    for rec in state.history:
        assert all(math.isfinite(v) for v in rec.losses.values())
        assert 0 <= rec.closed_acc <= 1 and 0 <= rec.util_rate <= 1
    _, epoch, acc = select_best_checkpoint(state)
    assert acc >= state.history[-1].closed_acc
    assert acc == max(r.closed_acc for r in state.history)


def _state_with(accs):
    state = init_state(quick(), 4)
    state.history = [MetricsRecord(i, a, 0.0, [], 0.0) for i, a in enumerate(accs)]
    return state


@pytest.mark.parametrize("accs, epoch", [([0.5, 0.7, 0.6], 1), ([0.4, 0.4, 0.4], 0), ([0.9], 0)])
def test_best_checkpoint_selection(accs, epoch):
    _, got, acc = select_best_checkpoint(_state_with(accs))
    assert got == epoch and acc == accs[epoch]


def test_best_checkpoint_needs_an_epoch():
    with pytest.raises(TapeError):
        select_best_checkpoint(_state_with([]))


def test_nonfinite_loss_aborts(task):
    config = quick()
    state = init_state(config, task.num_seen)
    lab, unl = next_batch(task, config.batch_size, config.mu, state.batch_rng)
    state.params["closed.w"].data[0, 0] = np.nan
    with pytest.raises(TrainingAborted, match="non-finite"):
        train_iteration(state, lab, unl, config)


def test_head_overhead_below_five_percent():
    state = init_state(TrainConfig(), 4)
    assert head_overhead(state.params) < 0.05
