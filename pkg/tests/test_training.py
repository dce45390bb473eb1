import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import max_relative_error, numeric_gradients, tiny_instance
from sparsedetnet import channel, model, training
from sparsedetnet.errors import ConfigurationError, ContractError
from sparsedetnet.model import ForwardTrace
from sparsedetnet.numerics import make_rng

SPECS = [
    training.LossSpec("plain"),
    training.LossSpec("element_l1", lam=0.04),
    training.LossSpec("sparse_group", lam1=0.04, lam2=0.04),
]


def fake_trace(estimates):
    """Trace carrying only the estimates after each layer."""
    L = len(estimates)
    x0 = np.zeros_like(estimates[0])
    return ForwardTrace(None, None, [None] * L, [None] * L, [None] * L, [None] * L,
                        [x0] + list(estimates), [None] * (L + 1))


def test_loss_single_layer_is_zero():
    x = np.array([[1.0, -1.0]])
    assert training.loss_plain(fake_trace([np.array([[5.0, 7.0]])]), x, np.zeros_like(x)) == 0.0


def test_loss_perfect_estimates():
    x = np.array([[1.0, -1.0, 1.0]])
    assert training.loss_plain(fake_trace([x, x, x]), x, np.zeros_like(x)) == 0.0


def test_loss_hand_value():
    x = np.array([[1.0]])
    tr = fake_trace([np.array([[0.3]]), np.array([[0.0]])])
    assert training.loss_plain(tr, x, np.array([[0.0]])) == pytest.approx(math.log(2), rel=1e-15)
    assert round(math.log(2), 4) == 0.6931


def test_loss_zero_denominator_floored():
    x = np.array([[1.0]])
    tr = fake_trace([x, np.array([[1.0 - 1e-7]])])
    value = training.loss_plain(tr, x, x)
    assert value == pytest.approx(math.log(2) * 1e-14 / training.DENOM_FLOOR)


def _one_layer(W1):
    p = model.init_params(make_rng(0), 1, 1, 1)
    layer = p.layers[0]
    layer.W1 = np.zeros_like(layer.W1)
    layer.W1[0, :len(W1)] = W1
    layer.W2[:] = 0
    layer.W3[:] = 0
    return p


def test_element_l1_examples():
    p = _one_layer([1.0, -2.0])
    assert training.loss_element_l1(p, 0.5) == 1.5
    assert training.loss_element_l1(p, 0.0) == 0.0
    assert training.loss_element_l1(_one_layer([]), 0.3) == 0.0


def test_element_l1_ignores_masked_and_biases():
    p = _one_layer([1.0, -2.0])
    p.layers[0].b1[:] = 9.0
    p.layers[0].masks["W1"][0, 1] = False
    assert training.loss_element_l1(p, 1.0) == 1.0


def test_element_l1_scaling():
    p = model.init_params(make_rng(1), 3, 4, 2)
    assert training.loss_element_l1(p, 0.08) == pytest.approx(2 * training.loss_element_l1(p, 0.04), rel=1e-15)


def test_sparse_group_column_norm():
    p = _one_layer([])
    p.layers[0].W1[:2, 0] = [3.0, 4.0]
    assert training.loss_sparse_group(p, 1.0, 0.0) == 5.0


def test_sparse_group_bias_group():
    p = _one_layer([])
    p.layers[0].b1[:2] = [6.0, 8.0]
    assert training.loss_sparse_group(p, 1.0, 0.0) == 10.0
    assert training.loss_sparse_group(p, 1.0, 1.0) == 10.0


def test_sparse_group_matches_scalar_recomputation():
    p = model.init_params(make_rng(2), 3, 5, 2)
    rng = make_rng(3)
    for layer in p.layers:
        layer.b1 = rng.standard_normal(layer.b1.shape)
        layer.b3 = rng.standard_normal(layer.b3.shape)
    expected = 0.0
    for layer in p.layers:
        for W, b in ((layer.W1, layer.b1), (layer.W2, layer.b2), (layer.W3, layer.b3)):
            rows, cols = W.shape
            for c in range(cols):
                expected += 0.04 * math.sqrt(sum(W[r][c] ** 2 for r in range(rows)))
            expected += 0.04 * math.sqrt(sum(v * v for v in b))
            expected += 0.04 * sum(abs(W[r][c]) for r in range(rows) for c in range(cols))
    assert training.loss_sparse_group(p, 0.04, 0.04) == pytest.approx(expected, abs=1e-10)


def test_regularizers_zero_iff_zero():
    p = _one_layer([])
    assert training.loss_sparse_group(p, 1.0, 1.0) == 0
    p.layers[0].b2[0] = 1e-3
    assert training.loss_element_l1(p, 1.0) == 0
    assert training.loss_sparse_group(p, 1.0, 1.0) > 0


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    p, data, xt = tiny_instance(seed)
    numeric = numeric_gradients(p, data, xt, SPECS)
    tr = model.forward(p, data.H, data.y)
    for spec, num in zip(SPECS, numeric):
        assert max_relative_error(training.backward(tr, p, data.x, xt, spec), num) < 1e-5


def test_backward_zero_error_gives_zero_gradients():
    p = model.init_params(make_rng(4), 2, 3, 3)
    data = channel.generate_batch(make_rng(5), 3, 2, 4, 10.0)
    tr = model.forward(p, data.H, data.y)
    x = tr.xhat[-1]
    tr.xhat[1:] = [x] * 3
    grads = training.backward(tr, p, x, training.zf_estimates(data), SPECS[0])
    assert all(not np.any(g[n]) for g in grads for n in model.WEIGHTS + model.BIASES)
    assert all(g["t"] == 0 for g in grads)


def test_backward_frozen_and_masked_are_zero():
    p, data, xt = tiny_instance(7)
    p.frozen_prefix = 1
    p.layers[2].masks["W1"][:, 0] = False
    p.layers[2].masks["b2"][1] = False
    tr = model.forward(p, data.H, data.y)
    g = training.backward(tr, p, data.x, xt, SPECS[2])
    assert all(not np.any(g[0][n]) for n in model.WEIGHTS + model.BIASES) and g[0]["t"] == 0
    assert not g[2]["W1"][:, 0].any() and g[2]["b2"][1] == 0
    assert np.any(g[1]["W1"])


def test_backward_trace_mismatch():
    p = model.init_params(make_rng(0), 2, 3, 3)
    data = channel.generate_batch(make_rng(1), 3, 2, 2, 10.0)
    tr = model.forward(p.truncated(2), data.H, data.y)
    with pytest.raises(ContractError):
        training.backward(tr, p, data.x, training.zf_estimates(data), SPECS[0])


def test_lr_schedule():
    cfg = training.TrainConfig()
    assert cfg.lr_at(0) == 1e-4
    assert cfg.lr_at(999) == 1e-4
    assert cfg.lr_at(1000) == pytest.approx(1e-4 * 0.97, rel=1e-15)
    assert cfg.lr_at(2500) == pytest.approx(1e-4 * 0.97 ** 2, rel=1e-15)


def _grads_like(p, value):
    out = []
    for layer in p.layers:
        g = {n: np.full_like(getattr(layer, n), value) for n in model.WEIGHTS + model.BIASES}
        g["t"] = value
        out.append(g)
    return out


def test_adam_zero_gradient_is_noop():
    p = model.init_params(make_rng(0), 2, 3, 2)
    before = p.copy()
    state = training.AdamState()
    training.adam_step(p, _grads_like(p, 0.0), state, training.TrainConfig())
    for la, lb in zip(p.layers, before.layers):
        assert all(np.array_equal(getattr(la, n), getattr(lb, n)) for n in model.WEIGHTS + model.BIASES)
    assert state.step == 1 and not state.m[0]["W1"].any()


def test_adam_first_step_closed_form():
    p = model.init_params(make_rng(0), 2, 3, 1)
    before = p.copy()
    cfg = training.TrainConfig()
    g = 0.37
    training.adam_step(p, _grads_like(p, g), training.AdamState(), cfg)
    expected = -cfg.lr0 * g / (abs(g) + cfg.adam_eps)
    np.testing.assert_allclose(p.layers[0].W1 - before.layers[0].W1, expected, rtol=1e-9)


def test_adam_respects_masks_frozen_and_t_clamp():
    p = model.init_params(make_rng(1), 2, 3, 2)
    p.frozen_prefix = 1
    p.layers[1].masks["W2"][0, :] = False
    p.layers[1].t = model.T_MIN
    before = p.copy()
    cfg = training.TrainConfig(lr0=0.1)
    state = training.AdamState()
    training.adam_step(p, _grads_like(p, 1.0), state, cfg)
    for n in model.WEIGHTS + model.BIASES:
        assert np.array_equal(getattr(p.layers[0], n), getattr(before.layers[0], n))
    assert np.array_equal(p.layers[1].W2[0], before.layers[1].W2[0])
    assert not np.array_equal(p.layers[1].W2[1], before.layers[1].W2[1])
    assert p.layers[1].t == model.T_MIN


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        training.TrainConfig(T_step=0)
    with pytest.raises(ConfigurationError):
        training.TrainConfig(snr_range_db=(10, 0))
    with pytest.raises(ConfigurationError):
        training.LossSpec("l2")


SMALL = training.TrainConfig(lr0=3e-3, batch_size=32, total_batches=20, val_samples=200,
                             snr_range_db=(0, 10), val_snr_db=10, halt_epsilon=None)


def test_validate_deterministic_and_bounded():
    p = model.init_params(make_rng(0), 4, 8, 3)
    ev = training.make_eval_set(5, 8, 4, 500, 12.0)
    a, b = training.validate(p, ev), training.validate(p, ev)
    assert a == b
    assert 0 < a.ber <= 0.5 + 0.05


def test_validate_perfect_noiseless():
    ev = training.make_eval_set(5, 3, 1, 200, np.inf)
    p = model.init_params(make_rng(0), 1, 3, 1)
    layer = p.layers[0]
    for n in model.WEIGHTS + model.BIASES:
        getattr(layer, n)[...] = 0
    # z = relu(+-H^T y), x' = clip(z+ - z-) saturates to the transmitted sign
    layer.W1[0, 0], layer.W1[1, 0] = 100.0, -100.0
    layer.W2[0, 0], layer.W2[0, 1] = 1.0, -1.0
    assert training.validate(p, ev).ber == 0.0


def test_degenerate_schedule_is_whole_network_training():
    a, _ = training.train_full(SMALL, training.LossSpec(), 3, 2, 3, 4)
    cfg = replace(SMALL, start_layers=4, T_step=4, max_layers=4)
    b, recs = training.train_incremental(cfg, training.LossSpec(), 3, 2, 3)
    assert len(recs) == 1 and recs[0].layer_count == 4
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.W1, lb.W1) and la.t == lb.t


def test_incremental_freezes_and_logs(tmp_path):
    cfg = replace(SMALL, start_layers=2, T_step=2, max_layers=6)
    snaps = {}
    params, recs = training.train_incremental(
        cfg, SPECS[2], 4, 2, 3, log_path=tmp_path / "log.csv",
        on_step=lambda t, p, r: snaps.setdefault(t, p.copy()))
    assert [r.layer_count for r in recs] == [2, 4, 6]
    for t in (0, 1):
        for k in range((t + 1) * 2):
            for n in model.WEIGHTS + model.BIASES:
                assert np.array_equal(getattr(snaps[t].layers[k], n), getattr(params.layers[k], n))
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(training.LOG_COLUMNS)
    assert len(lines) == 4


def test_incremental_halts_on_target():
    cfg = replace(SMALL, start_layers=2, T_step=2, max_layers=8, target_ber=1.0)
    _, recs = training.train_incremental(cfg, SPECS[0], 4, 2, 3)
    assert len(recs) == 1


def test_incremental_halts_on_plateau():
    cfg = replace(SMALL, start_layers=1, T_step=1, max_layers=30, halt_epsilon=0.99)
    _, recs = training.train_incremental(cfg, SPECS[0], 4, 2, 3)
    assert len(recs) < 30


def test_divergence_detected():
    p = model.init_params(make_rng(0), 2, 3, 2)
    p.layers[0].W1[0, 0] = np.nan
    with pytest.raises(training.DivergenceError):
        training.train_layers(p, SPECS[0], SMALL, make_rng(1), batches=1)
