import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tafenet import checkpoint
from tafenet import tensor as tc
from tafenet.model import (FCStack, FactorizedConvLayer, FactorizedFCLayer, GainsNotInstalled, ModelConfig, TAFENet,
                           generated_count)
from tafenet.tensor import ShapeError, Tensor

from test_kernels import brute_conv

F64 = np.float64


def small_net(seed=0, d_in=5, d_task=4, widths=(6, 6, 6), hidden=7, depth=None):
    cfg = ModelConfig(d_in=d_in, d_task=d_task, widths=widths, embed_hidden=hidden, embed_depth=depth)
    return TAFENet(cfg, seed=seed, dtype=F64)


def T(x, grad=False):
    return Tensor(x, requires_grad=grad, dtype=F64)


# --- task embedding and generators --------------------------------------


def test_embed_zero_weights_give_zero():
    net = small_net()
    for p in net.embed.parameters():
        p.data[...] = 0
    assert np.array_equal(net.embed_task(np.arange(4.0)).data, np.zeros(6))


def test_embed_identity_single_layer():
    stack = FCStack([3, 3], np.random.default_rng(0), F64, "e")
    stack.weights[0].data[...] = np.eye(3)
    t = np.array([0.5, -2.0, 1.5])
    assert np.array_equal(stack(T(t)).data, t)  # negative entry survives: no relu after the last layer


def test_embed_matches_straight_line_reimplementation(rng):
    stack = FCStack([64, 32, 32], np.random.default_rng(3), F64, "e")
    t = rng.standard_normal(64)
    w0, w1 = (w.data for w in stack.weights)
    b0, b1 = (b.data for b in stack.biases)
    expected = np.maximum(t @ w0 + b0, 0) @ w1 + b1
    assert np.allclose(stack(T(t)).data, expected, atol=1e-12)
    with pytest.raises(ShapeError):
        stack(T(np.ones(5)))


def test_generator_constant_case_and_index_check():
    net = small_net()
    net.gen_weights[1].data[...] = 0
    net.gen_biases[1].data[...] = np.arange(6.0)
    for t in (np.zeros(4), np.ones(4)):
        assert np.array_equal(net.generate_gains(net.embed_task(t), 2).data, np.arange(6.0))
    for bad in (0, 4):
        with pytest.raises(IndexError):
            net.generate_gains(net.embed_task(np.ones(4)), bad)


def test_distinct_embeddings_give_distinct_gains(rng):
    net = small_net(seed=5)
    g1 = net.generate_gains(T(rng.standard_normal(6)), 1).data
    g2 = net.generate_gains(T(rng.standard_normal(6)), 1).data
    assert not np.allclose(g1, g2)


def test_initial_gains_near_one():
    net = small_net(seed=2)
    g = net.generate_gains(net.embed_task(np.ones(4)), 1).data
    assert np.all(np.abs(g - 1) < 0.1)


def test_generated_parameter_count():
    conv = FactorizedConvLayer(3, 64, 128, np.random.default_rng(0), F64)
    assert generated_count(conv) == 128
    assert conv.shared.data.size == 3 * 3 * 64 * 128 == 73_728
    fc = FactorizedFCLayer(10, 7, np.random.default_rng(0), F64, "l")
    assert generated_count(fc) == 7


# --- factorized layers -----------------------------------------------------


def fc_layer(m, n, seed=0):
    return FactorizedFCLayer(m, n, np.random.default_rng(seed), F64, "l")


def test_fc_identity_and_zero_gains(rng):
    layer = fc_layer(3, 2)
    layer.bias.data[...] = [0.5, -0.5]
    x = rng.standard_normal(3)
    layer.install(T(np.ones(2)))
    assert np.allclose(layer.forward(T(x)).data, x @ layer.shared.data + layer.bias.data, atol=1e-15)
    layer.install(T(np.zeros(2)))
    assert np.array_equal(layer.forward(T(x)).data, layer.bias.data)


def test_fc_requires_installed_gains():
    layer = fc_layer(3, 2)
    with pytest.raises(GainsNotInstalled):
        layer.forward(T(np.ones(3)))
    layer.install(T(np.ones(2)))
    layer.clear()
    with pytest.raises(GainsNotInstalled):
        layer.forward(T(np.ones(3)))
    with pytest.raises(ShapeError):
        layer.install(T(np.ones(3)))


@given(m=st.integers(1, 64), n=st.integers(1, 64), batch=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_fc_factorization_identity(m, n, batch, seed):
    r = np.random.default_rng(seed)
    layer = fc_layer(m, n, seed)
    gains = r.standard_normal(n)
    x = r.standard_normal((batch, m))
    layer.install(T(gains))
    modulated = layer.forward(T(x)).data - layer.bias.data
    materialized = x @ layer.materialized_weight()
    assert np.max(np.abs(modulated - materialized)) <= 1e-12


def conv_layer(k, c_in, c_out, seed=0):
    return FactorizedConvLayer(k, c_in, c_out, np.random.default_rng(seed), F64)


def test_conv_identity_gains_and_degenerate_fc(rng):
    layer = conv_layer(3, 2, 2)
    x = rng.standard_normal((4, 4, 2))
    layer.install(T(np.ones(2)))
    assert np.allclose(layer.forward(T(x)).data, brute_conv(x[None], layer.shared.data)[0], atol=1e-12)

    one = conv_layer(1, 3, 2)
    fc = fc_layer(3, 2)
    fc.shared.data[...] = one.shared.data[0, 0]
    gains = T(rng.standard_normal(2))
    one.install(gains)
    fc.install(gains)
    x1 = rng.standard_normal(3)
    assert np.allclose(one.forward(T(x1.reshape(1, 1, 3))).data.reshape(2), fc.forward(T(x1)).data, atol=1e-15)


def test_conv_random_instance_against_brute_force(rng):
    layer = conv_layer(3, 2, 2)
    gains = rng.standard_normal(2)
    x = rng.standard_normal((4, 4, 2))
    layer.install(T(gains))
    expected = brute_conv(x[None], layer.shared.data)[0] * gains
    assert np.max(np.abs(layer.forward(T(x)).data - expected)) <= 1e-10


def test_conv_channel_mismatch():
    layer = conv_layer(3, 2, 2)
    layer.install(T(np.ones(2)))
    with pytest.raises(ShapeError):
        layer.forward(T(np.ones((4, 4, 3))))


# --- whole network ---------------------------------------------------------


def test_task_sensitivity_and_logit_change(rng):
    net = small_net(seed=7, widths=(32, 32, 32), hidden=16)
    x = rng.standard_normal(5)
    t1, t2 = rng.standard_normal(4), rng.standard_normal(4)
    assert not np.array_equal(net.compute_tafe(x, t1).data, net.compute_tafe(x, t2).data)
    assert net.predict_logit(x, t1).item() != net.predict_logit(x, t2).item()


def test_identity_gains_give_plain_network(rng):
    net = small_net(seed=1)
    for w, b in zip(net.gen_weights, net.gen_biases):
        w.data[...] = 0
        b.data[...] = 1
    x = rng.standard_normal(5)
    h = x
    for layer in net.layers:
        h = np.maximum(h @ layer.shared.data + layer.bias.data, 0)
    assert np.allclose(net.compute_tafe(x, rng.standard_normal(4)).data, h, atol=1e-12)


def test_zero_input_zero_bias_gives_zero_tafe(rng):
    net = small_net(seed=1)
    assert np.array_equal(net.compute_tafe(np.zeros(5), rng.standard_normal(4)).data, np.zeros(6))


def test_classifier_cases(rng):
    net = small_net(seed=4)
    net.cls_weight.data[...] = 0
    net.cls_bias.data[...] = 2.5
    assert net.predict_logit(rng.standard_normal(5), rng.standard_normal(4)).item() == 2.5
    x, t = rng.standard_normal(5), rng.standard_normal(4)
    tafe = net.compute_tafe(x, t).data
    net.cls_weight.data[...] = tafe
    net.cls_bias.data[...] = 0
    assert net.predict_logit(x, t).item() == pytest.approx(float(tafe @ tafe), rel=1e-12)


def test_score_matrix_consistency(rng):
    net = small_net(seed=9)
    X = rng.standard_normal((2, 5))
    tasks = rng.standard_normal((2, 4))
    S = net.score_matrix(X, tasks)
    for i in range(2):
        for j in range(2):
            assert S[i, j] == pytest.approx(net.predict_logit(X[i], tasks[j]).item(), abs=1e-12)
    dup = net.score_matrix(X, tasks[[0, 0]])
    assert np.array_equal(dup[:, 0], dup[:, 1])
    logits, tafes, E = net.forward_pairs(X, tasks)
    assert np.allclose(logits.data, S, atol=1e-12)
    assert tafes.shape == (2, 2, 6) and E.shape == (2, 6)
    assert np.allclose(tafes.data[1, 0], net.compute_tafe(X[1], tasks[0]).data, atol=1e-12)


def test_one_classifier_regardless_of_task_count(tmp_path):
    net = small_net()
    checkpoint.save_model(tmp_path / "m.ckpt", net)
    arrays, _ = checkpoint.load(tmp_path / "m.ckpt")
    assert [k for k in arrays if k.startswith("pred.cls.weight")] == ["pred.cls.weight"]
    assert arrays["pred.cls.weight"].shape == (6,)


def test_depth_rule():
    assert ModelConfig(d_in=2, d_task=2).resolved_depth(20) == 2
    assert ModelConfig(d_in=2, d_task=2).resolved_depth(32) == 3
    assert ModelConfig(d_in=2, d_task=2, embed_depth=4).resolved_depth(5) == 4
    net = TAFENet(ModelConfig(d_in=2, d_task=2, widths=(3,), embed_hidden=3), n_train_tasks=10, dtype=F64)
    assert net.embed.depth == 2 and net.manifest()["embed_depth"] == 2


def test_accepts_wide_backbone_features(rng):
    net = TAFENet(ModelConfig(d_in=2048, d_task=8, widths=(16, 16), embed_hidden=16), seed=0)
    assert net.score_matrix(rng.standard_normal((3, 2048)), rng.standard_normal((2, 8))).shape == (3, 2)


def test_end_to_end_gradients(rng, f64):
    net = small_net(seed=11, d_in=4, d_task=3, widths=(5, 4), hidden=5, depth=2)
    x, t = rng.standard_normal(4), rng.standard_normal(3)
    params = list(net.parameters().values())
    assert tc.grad_check(lambda: net.predict_logit(x, t), params) < 1e-4


def test_same_seed_same_parameters():
    a, b = small_net(seed=3).parameters(), small_net(seed=3).parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
