import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsedetnet import channel, compression as cp, model
from sparsedetnet.errors import ConfigurationError
from sparsedetnet.model import BIASES, WEIGHTS
from sparsedetnet.numerics import make_rng


def small_params(seed=0, K=3, N=5, L=2):
    p = model.init_params(make_rng(seed), K, N, L)
    rng = make_rng(seed, 1)
    for layer in p.layers:
        for n in BIASES:
            getattr(layer, n)[...] = 0.1 * rng.standard_normal(getattr(layer, n).shape)
    return p


def blank_params(K=1, N=1, L=1):
    p = model.init_params(make_rng(0), K, N, L)
    for layer in p.layers:
        for n in WEIGHTS + BIASES:
            getattr(layer, n)[...] = 0.0
    return p


def masks_of(p):
    return [{n: layer.masks[n].copy() for n in WEIGHTS + BIASES} for layer in p.layers]


def same_masks(a, b):
    return all(np.array_equal(x[n], y[n]) for x, y in zip(masks_of(a), masks_of(b)) for n in x)


def test_element_threshold_example():
    p = blank_params()
    W = p.layers[0].W1
    W[0, :3] = [0.1, -0.02, 0.5]
    out = cp.prune_element(p, 0.05)  # threshold 0.025
    assert out.layers[0].masks["W1"][0, :3].tolist() == [True, False, True]


def test_element_threshold_is_strict():
    p = blank_params()
    p.layers[0].W1[0, :2] = [1.0, 0.5]
    assert cp.prune_element(p, 0.5).layers[0].masks["W1"][0, 1]


def test_group_column_example():
    p = blank_params()
    W = p.layers[0].W1
    W[:2, 0] = [3.0, 4.0]
    W[0, 1] = 0.001
    W[0, 2] = 2.0
    m = cp.prune_group(p, 0.01).layers[0].masks["W1"]
    assert m[:, 0].all() and not m[:, 1].any() and m[:, 2].all()
    assert not m[:, 3:].any()  # zero-norm columns fall below any positive threshold


def test_group_absolute_mode():
    p = blank_params()
    p.layers[0].W1[0, :2] = [0.2, 0.05]
    m = cp.prune_group(p, 0.1, absolute=True).layers[0].masks["W1"]
    assert m[0, 0] and not m[0, 1]


def test_eta_zero_is_identity():
    p = small_params()
    for spec in (cp.PruneSpec("element", eta=0), cp.PruneSpec("group", eta1=0),
                 cp.PruneSpec("sparse_group", eta1=0, eta2=0), cp.PruneSpec("none")):
        assert all(m.all() for d in masks_of(cp.apply_prune(p, spec)) for m in d.values())


def test_pruning_does_not_touch_values_or_input():
    p = small_params()
    before = p.copy()
    out = cp.prune_sparse_group(p, 0.3, 0.3)
    assert same_masks(p, before)
    for la, lb in zip(p.layers, out.layers):
        for n in WEIGHTS + BIASES:
            assert np.array_equal(getattr(la, n), getattr(lb, n))


def test_prune_spec_validation():
    with pytest.raises(ConfigurationError):
        cp.PruneSpec("element", eta=1.0)
    with pytest.raises(ConfigurationError):
        cp.PruneSpec("blocks")
    with pytest.raises(ConfigurationError):
        cp.memory_bytes(small_params(), "csr")


def test_fully_masked_memory_and_flops():
    K, N, L = 3, 5, 4
    p = small_params(K=K, N=N, L=L)
    for layer in p.layers:
        for n in WEIGHTS + BIASES:
            layer.masks[n][...] = False
    assert cp.memory_bytes(p) == 4 * L
    assert cp.flops_per_detection(p) == cp.preprocess_flops(K, N) == 2 * N * K + 2 * N * K * K


def test_single_unit_layer_flops():
    p = model.init_params(make_rng(0), 1, 1, 1)
    assert cp.layer_flops(p.layers[0], 1) == 2 * (40 + 8 + 16) + 2 == 130
    assert cp.flops_per_detection(p, include_preprocess=False) == 130


def test_dense_reference_numbers():
    p = model.init_params(make_rng(0), 20, 30, 90)
    rep = cp.cost_report(p)
    assert rep.params_total == 90 * 25821
    assert rep.memory_bytes == rep.memory_bytes_dense == 9_295_560
    assert abs(rep.memory_mb - 9.19) / 9.19 < 0.02
    assert rep.flops_dense == rep.flops_per_detection == 4_705_200
    assert abs(rep.flops_per_detection - 4.9e6) / 4.9e6 < 0.10


def test_report_consistency_and_json_roundtrip():
    p = cp.prune_sparse_group(small_params(L=3), 0.2, 0.1)
    rep = cp.cost_report(p, label="x")
    assert rep.params_nonzero == sum(r["params_nonzero"] for r in rep.layers)
    assert rep.flops_per_detection == sum(r["flops"] for r in rep.layers) + rep.preprocess_flops
    assert rep.memory_bytes == 4 * rep.params_nonzero
    assert rep.flops_per_detection <= rep.flops_dense
    assert cp.CostReport.from_json(rep.to_json()) == rep
    assert json.loads(rep.to_json())["label"] == "x"
    assert len(rep.csv_row()) == len(cp.COST_CSV_COLUMNS)


def test_params_nonzero_brute_force():
    p = cp.prune_element(small_params(L=2), 0.4)
    count = 0
    for layer in p.layers:
        for n in WEIGHTS + BIASES:
            for v in np.asarray(layer.eff(n)).ravel():
                count += v != 0
        count += 1
    assert cp.cost_report(p).params_nonzero == count


def test_live_row_refinement():
    K = 2
    p = model.init_params(make_rng(0), K, 3, 1)
    layer = p.layers[0]
    full = cp.layer_flops(layer, K)
    layer.masks["W1"][:, 2 * K] = False
    nnz_col = layer.W1.shape[0]
    assert cp.layer_flops(layer, K) == full - 2 * nnz_col - 2 * K


thresholds = st.floats(0.0, 0.9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), thresholds, thresholds)
def test_monotone_in_threshold(seed, a, b):
    lo, hi = sorted((a, b))
    p = small_params(seed)
    for fn in (cp.prune_element, cp.prune_group):
        m_lo, m_hi = masks_of(fn(p, lo)), masks_of(fn(p, hi))
        for d_lo, d_hi in zip(m_lo, m_hi):
            for n in d_lo:
                assert not np.any(d_hi[n] & ~d_lo[n])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), thresholds, thresholds)
def test_idempotent(seed, e1, e2):
    p = small_params(seed)
    for fn in (lambda q: cp.prune_element(q, e1), lambda q: cp.prune_group(q, e1),
               lambda q: cp.prune_sparse_group(q, e1, e2)):
        once = fn(p)
        assert same_masks(fn(once), once)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), thresholds, thresholds)
def test_sparse_group_is_and_of_stage_masks(seed, e1, e2):
    p = small_params(seed)
    g = cp.prune_group(p, e1)
    e = cp.prune_element(g, e2)
    out = cp.prune_sparse_group(p, e1, e2)
    if same_masks(cp.prune_group(e, e1), e):  # single round reached the fixed point
        for lo, lg, le in zip(out.layers, g.layers, e.layers):
            for n in WEIGHTS + BIASES:
                assert np.array_equal(lo.masks[n], lg.masks[n] & le.masks[n])
    for lo, lg in zip(out.layers, g.layers):
        for n in WEIGHTS + BIASES:
            assert not np.any(lo.masks[n] & ~lg.masks[n])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), thresholds, thresholds)
def test_memory_non_increasing_under_more_pruning(seed, e1, e2):
    p = small_params(seed)
    once = cp.prune_group(p, e1)
    twice = cp.prune_element(once, e2)
    assert cp.memory_bytes(twice) <= cp.memory_bytes(once) <= cp.memory_bytes(p) == cp.memory_bytes(p, "dense")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 50), st.sampled_from(["element", "group", "sparse_group"]), thresholds)
def test_pruned_forward_equals_zeroed_dense(seed, kind, eta):
    p = small_params(seed)
    spec = cp.PruneSpec(kind, eta=eta, eta1=eta, eta2=eta / 2)
    pruned = cp.apply_prune(p, spec)
    data = channel.generate_batch(make_rng(seed, 9), p.N, p.K, 16, 10.0)
    a = model.forward(pruned, data.H, data.y).xhat[-1]
    b = model.forward(pruned.zeroed(), data.H, data.y).xhat[-1]
    assert np.array_equal(a, b)
