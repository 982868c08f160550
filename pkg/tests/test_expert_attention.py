import dataclasses

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from headroute import numkit as nk
from headroute.encoder import Encoder, EncoderConfig
from headroute.expert_attention import (
    DeterministicLayer, MoELayer, convert_layer, deterministic_forward, expander_forward,
    gate_scores, head_forward, moe_forward, select_top_k,
)
from headroute.numkit import Tape, Tensor

from helpers import attention_loop, gelu_ref, layer_norm_ref


@pytest.fixture
def cfg(toy_cfg):
    return dataclasses.replace(toy_cfg, init_std=0.3)


@pytest.fixture
def layer(cfg):
    model = Encoder(cfg)
    return convert_layer(model.layers[0], cfg, model.init, k=1)


def single_expert_layer(layer, e):
    return DeterministicLayer(layer.prefix, [layer.experts[e]], layer.expander, layer.ln, [e])


def test_select_top_k_examples():
    assert select_top_k(np.array([[0.1, 0.9, 0.3]]), 1).tolist() == [[1]]
    assert select_top_k(np.array([[0.5, 0.5]]), 1).tolist() == [[0]]
    assert select_top_k(np.array([[3.0, 1.0, 2.0]]), 2).tolist() == [[0, 2]]
    with pytest.raises(ValueError):
        select_top_k(np.zeros((1, 3)), 4)


# integer-valued scores keep the shift exact, so ties survive it
@given(g=st.lists(st.integers(-5, 5), min_size=2, max_size=8), c=st.integers(-100, 100),
       k=st.integers(1, 2))
def test_top_k_shift_invariance(g, c, k):
    g = np.array([g], dtype=np.float64)
    assert np.array_equal(select_top_k(g, k), select_top_k(g + c, k))


def test_head_single_position_returns_value_row(layer, rng):
    e = layer.experts[0]
    x = rng.standard_normal((1, 1, 16))
    v = x @ e.v.w.data + e.v.b.data
    np.testing.assert_allclose(head_forward(Tensor(x), e, None).data, v, atol=1e-14)


def test_head_identical_keys_average_values(layer, rng):
    e = layer.experts[1]
    e.k.w.data[:] = 0  # every key equals the bias -> uniform attention
    x = rng.standard_normal((1, 2, 16))
    v = x[0] @ e.v.w.data + e.v.b.data
    np.testing.assert_allclose(head_forward(Tensor(x), e, None).data[0],
                               np.tile(v.mean(0), (2, 1)), atol=1e-12)


def test_head_matches_loop_oracle(rng):
    cfg = EncoderConfig(d=4, h=2, n_layers=1, d_ff=4, dtype="float64", init_std=0.5)
    model = Encoder(cfg)
    e = convert_layer(model.layers[0], cfg, model.init).experts[1]
    x = rng.standard_normal((1, 3, 4))
    ref = attention_loop(x[0], e.q.w.data, e.q.b.data, e.k.w.data, e.k.b.data,
                         e.v.w.data, e.v.b.data)
    np.testing.assert_allclose(head_forward(Tensor(x), e, None).data[0], ref, atol=1e-6)


def test_expander_zero_weights_give_zero(layer, rng):
    exp = layer.expander
    exp.proj.w.data[:] = 0
    out = expander_forward(Tensor(rng.standard_normal((2, 3, 4))), exp).data
    assert np.array_equal(out, np.zeros((2, 3, 16)))


def test_expander_composition(layer, rng):
    hx = rng.standard_normal((2, 3, 4))
    exp = layer.expander
    ref = layer_norm_ref(gelu_ref(hx @ exp.proj.w.data + exp.proj.b.data),
                         exp.ln.gamma.data, exp.ln.beta.data)
    np.testing.assert_allclose(expander_forward(Tensor(hx), exp).data, ref, atol=1e-12)


def test_gate_scores(layer, rng):
    x = rng.standard_normal((3, 4, 16))
    x[2] = x[0]
    g = gate_scores(Tensor(x), layer.router).data
    assert g.shape == (3, 4)
    assert np.array_equal(g[0], g[2])
    layer.router.proj.w.data[:] = 0
    layer.router.proj.b.data[:] = [1, 2, 3, 4]
    assert np.array_equal(gate_scores(Tensor(x), layer.router).data, np.tile([1, 2, 3, 4.0], (3, 1)))


def test_convert_layer_slices_heads(cfg):
    model = Encoder(cfg)
    std = model.layers[0]
    moe = convert_layer(std, cfg, model.init)
    assert moe.n_experts == cfg.h and moe.kind == "moe"
    dh = cfg.d_head
    for i, e in enumerate(moe.experts):
        assert np.array_equal(e.q.w.data, std.q.w.data[:, i * dh:(i + 1) * dh])
        assert np.array_equal(e.v.b.data, std.v.b.data[i * dh:(i + 1) * dh])
    names = [p.name for p in moe.parameters()]
    assert "layer.0.expert.3.k.w" in names and "layer.0.router.proj.w" in names


def test_converted_layer_count_bert_base():
    cfg = EncoderConfig.bert_base()
    model = Encoder(cfg, skeleton=True)
    moe = convert_layer(model.layers[0], cfg, model.init)
    d, dh, n = 768, 64, 12
    formula = n * 3 * (d * dh + dh) + (dh * d + d + 2 * d) + (d * n + n) + 2 * d
    assert moe.num_parameters() == formula == 1_833_996


def test_moe_per_row_oracle(layer, rng):
    x = rng.standard_normal((6, 5, 16))
    mask = np.ones((6, 5), dtype=int)
    mask[2, 3:] = 0
    y, dec = moe_forward(Tensor(x), layer, mask)
    assert dec.indices.shape == (6, 1)
    for b in range(6):
        e = int(dec.indices[b, 0])
        ref = deterministic_forward(Tensor(x[b:b + 1]), single_expert_layer(layer, e), mask[b:b + 1])
        np.testing.assert_allclose(y.data[b], ref.data[0], atol=1e-12)


def test_moe_forces_distinct_experts(layer, rng):
    # steer the router so two rows pick different experts
    layer.router.proj.w.data[:] = 0
    layer.router.proj.w.data[0, :] = [5, -5, 0, 0]
    x = rng.standard_normal((2, 3, 16))
    x[0, 0, 0], x[1, 0, 0] = 2.0, -2.0
    y, dec = moe_forward(Tensor(x), layer, None)
    assert dec.indices[:, 0].tolist() == [0, 1]
    for b in range(2):
        ref = deterministic_forward(Tensor(x[b:b + 1]), single_expert_layer(layer, b), None)
        np.testing.assert_allclose(y.data[b], ref.data[0], atol=1e-12)


def test_single_expert_always_selected(cfg, rng):
    model = Encoder(cfg)
    moe = MoELayer("layer.0", cfg, model.init, n_experts=1)
    x = Tensor(rng.standard_normal((3, 4, 16)))
    y, dec = moe_forward(x, moe, None)
    assert np.all(dec.indices == 0)
    np.testing.assert_array_equal(y.data, deterministic_forward(x, single_expert_layer(moe, 0), None).data)


def test_k_equals_n_with_tied_gates_is_mean(cfg, rng):
    model = Encoder(cfg)
    moe = convert_layer(model.layers[0], cfg, model.init, k=cfg.h)
    moe.router.proj.w.data[:] = 0
    x = rng.standard_normal((2, 3, 16))
    y, dec = moe_forward(Tensor(x), moe, None)
    assert dec.indices.tolist() == [[0, 1, 2, 3]] * 2
    outs = [expander_forward(head_forward(Tensor(x), e, None), moe.expander).data for e in moe.experts]
    ref = layer_norm_ref(np.mean(outs, axis=0) + x, 1.0, 0.0)
    np.testing.assert_allclose(y.data, ref, atol=1e-12)


def test_expert_isolation_and_gradient_sparsity(layer, rng):
    x = Tensor(rng.standard_normal((3, 4, 16)))
    y0, dec = moe_forward(x, layer, None)
    chosen = set(dec.indices[:, 0].tolist())
    idle = [i for i in range(4) if i not in chosen]
    assert idle, "fixture should leave at least one expert unused"
    layer.experts[idle[0]].q.w.data += 1.0
    assert np.array_equal(moe_forward(x, layer, None)[0].data, y0.data)

    for p in layer.parameters():
        p.zero_grad()
    w = rng.standard_normal(y0.shape)
    with Tape() as tape:
        loss = nk.sum(nk.mul(moe_forward(x, layer, None)[0], w))
    tape.backward(loss)
    for i in idle:
        assert all(np.all(p.grad == 0) for p in layer.experts[i].parameters())
    # hard routing: the router receives no task gradient
    assert all(np.all(p.grad == 0) for p in layer.router.parameters())
    assert any(np.any(p.grad != 0) for p in layer.experts[min(chosen)].parameters())


def test_shared_expander_on_every_path(layer, rng):
    x = Tensor(rng.standard_normal((3, 4, 16)))
    y0 = moe_forward(x, layer, None)[0].data
    layer.expander.proj.b.data += 0.5
    y1 = moe_forward(x, layer, None)[0].data
    assert np.all(np.abs(y1 - y0).reshape(3, -1).max(axis=1) > 0)


@given(seed=st.integers(0, 2**16), b=st.integers(1, 6))
@settings(max_examples=15)
def test_k1_equals_single_expert_layer(seed, b):
    cfg = EncoderConfig(d=8, h=4, n_layers=1, d_ff=8, dtype="float64", seed=seed, init_std=0.5)
    model = Encoder(cfg)
    moe = convert_layer(model.layers[0], cfg, model.init)
    x = np.random.default_rng(seed).standard_normal((b, 3, 8))
    y, dec = moe_forward(Tensor(x), moe, None)
    for r in range(b):
        single = single_expert_layer(moe, int(dec.indices[r, 0]))
        assert np.array_equal(y.data[r], deterministic_forward(Tensor(x[r:r + 1]), single, None).data[0])


def test_deterministic_layer_has_no_router(layer):
    det = single_expert_layer(layer, 2)
    assert det.kind == "deterministic" and det.m == 1
    assert not any("router" in p.name for p in det.parameters())
