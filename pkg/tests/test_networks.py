import numpy as np
import pytest

from iomatch import objectives as obj
from iomatch import tensor as T
from iomatch.networks import (ConfigError, NetworkDims, forward, forward_views, init_params,
                              load_checkpoint, params_from_dict, params_to_dict, save_checkpoint)
from iomatch.tensor import ShapeError

SMALL = NetworkDims(input_dim=6, hidden=(10, 10), feature_dim=8, proj_hidden=7, proj_dim=3)


def test_same_seed_identical():
    a, b = init_params(3, SMALL, 4), init_params(3, SMALL, 4)
    for name in a.tensors:
        assert np.array_equal(a[name].data, b[name].data)


def test_different_seeds_differ():
    a, b = init_params(1, SMALL, 4), init_params(2, SMALL, 4)
    assert not np.array_equal(a["enc0.w"].data, b["enc0.w"].data)


def test_head_widths():
    params = init_params(0, SMALL, 4)
    out = forward(params, np.zeros((2, 6)))
    assert out.p.shape == (2, 4)
    assert out.o.shape == (2, 4)
    assert out.q_open.shape == (2, 5)
    assert params["multibinary.w"].shape == (3, 8)
    assert params["closed.w"].shape == (8, 4)


def test_init_scale_and_zero_bias():
    params = init_params(0, SMALL, 3)
    w = params["enc0.w"].data
    assert np.abs(w).max() <= 1 / np.sqrt(6)
    for name, t in params.tensors.items():
        if name.endswith(".b"):
            assert not t.data.any()


def test_single_class_rejected():
    with pytest.raises(ConfigError):
        init_params(0, SMALL, 1)


def test_rows_are_stochastic():
    params = init_params(5, SMALL, 5)
    x = np.random.default_rng(0).normal(scale=3.0, size=(1000, 6))
    out = forward(params, x)
    np.testing.assert_allclose(out.p.data.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.q_open.data.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((out.o.data > 0) & (out.o.data < 1))


def test_zero_heads_give_uniform():
    params = init_params(0, SMALL, 4)
    for name in ("closed.w", "closed.b"):
        params[name].data[:] = 0
    out = forward(params, np.random.default_rng(1).normal(size=(3, 6)))
    np.testing.assert_array_equal(out.p.data, np.full((3, 4), 0.25))


def test_empty_batch():
    out = forward(init_params(0, SMALL, 3), np.zeros((0, 6)))
    assert out.p.shape == (0, 3) and out.q_open.shape == (0, 4)


def test_wrong_width_rejected():
    with pytest.raises(ShapeError):
        forward(init_params(0, SMALL, 3), np.zeros((2, 5)))


def test_views_and_purity():
    params = init_params(0, SMALL, 3)
    before = params.copy()
    x = np.random.default_rng(2).normal(size=(4, 6))
    weak, strong = forward_views(params, x, x.copy())
    assert np.array_equal(weak.q_open.data, strong.q_open.data)
    again = forward(params, x)
    assert np.array_equal(again.p.data, weak.p.data)
    for name in params.tensors:
        assert np.array_equal(params[name].data, before[name].data)


def test_checkpoint_round_trip(tmp_path):
    params = init_params(7, SMALL, 3)
    params["closed.b"].data[:] = [[1 / 3, -2e-300, np.pi]]
    path = tmp_path / "ck.json"
    save_checkpoint(params, path, meta={"epoch": 4})
    loaded = load_checkpoint(path)
    assert loaded.dims == params.dims and loaded.num_classes == 3
    for name in params.tensors:
        assert np.array_equal(loaded[name].data, params[name].data)
    assert params_to_dict(params_from_dict(params_to_dict(params))) == params_to_dict(params)


def test_heads_are_parameter_independent():
    params = init_params(4, SMALL, 3)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(6, 6)), rng.integers(0, 3, size=6)

    def closed_grads(with_mb):
        params.zero_grad()
        with T.Tape() as tape:
            out = forward(params, x)
            loss = obj.supervised_loss(out.p, y)
            if with_mb:
                loss = T.add(loss, obj.multi_binary_loss(out.o, y))
        T.backward(loss, tape)
        return params["closed.w"].grad.copy(), params["multibinary.w"].grad.copy()

    g_alone, mb_alone = closed_grads(False)
    g_both, mb_both = closed_grads(True)
    assert np.array_equal(g_alone, g_both)
    assert not mb_alone.any() and mb_both.any()
