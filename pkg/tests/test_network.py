import math

import numpy as np
import pytest

from leanconv.kernels import apply_reference
from leanconv.network import LeanResNet, NetworkConfig, build_network, table_config
from leanconv.network.layers import BN_EPS, BatchNorm, downsample
from leanconv.network.model import classify, cross_entropy, resolve_groups, softmax
from leanconv.operators import LeanConvSpec, StencilKind, param_count
from leanconv.tensor import FeatureMap, Layout, ShapeError, avg_pool2
from leanconv.verify import gradcheck_network

SMALL = dict(stage_widths=[4, 8], stage_steps=[1, 2], stage_strides=[1, 2], in_channels=2)


def small(stencil="5pt", group_rule="cin", **kw):
    return NetworkConfig(**dict(SMALL, stencil=stencil, group_rule=group_rule, **kw))


def jitter_norms(model, rng):
    for k in model.params:
        if k.endswith((".scale", ".shift")):
            model.params[k] = model.params[k] + 0.5 * rng.standard_normal(model.params[k].shape)


def naive_bn(a, scale, shift):
    mean = a.mean(axis=(0, 2, 3), keepdims=True)
    var = a.var(axis=(0, 2, 3), keepdims=True)
    return (a - mean) / np.sqrt(var + BN_EPS) * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)


def ref(spec, a):
    return apply_reference(spec, FeatureMap.from_array(a)).logical()


def block_oracle(model, blk, y):
    p = model.params
    h = np.maximum(naive_bn(y, p[blk.norm1.keys[0]], p[blk.norm1.keys[1]]), 0)
    h = ref(blk.k1.spec(p), h)
    if blk.transition:
        h = avg_pool2(FeatureMap.from_array(h)).logical()
    h = np.maximum(naive_bn(h, p[blk.norm2.keys[0]], p[blk.norm2.keys[1]]), 0)
    f = ref(blk.k2.spec(p), h)
    if blk.transition:
        skip = np.concatenate([y, ref(blk.skip.conv.spec(p), y)], axis=1)
        skip = avg_pool2(FeatureMap.from_array(skip)).logical()
    else:
        skip = y
    return skip + f


# --- blocks ---------------------------------------------------------------------


def test_zero_convs_make_every_block_the_identity(rng):
    model = build_network(NetworkConfig([6], [3], [1], "5pt", "1", in_channels=2), 3, zero_convs=True)
    x = rng.standard_normal((2, 2, 8, 8))
    opened = model.opening.forward(model.params, FeatureMap.from_array(x), path="reference")
    for blk in model.blocks():
        y = FeatureMap.from_array(rng.standard_normal((2, 6, 8, 8)))
        np.testing.assert_array_equal(blk.forward(model, y, train=True).logical(), y.logical())
    np.testing.assert_allclose(model.features(x), opened.logical().mean(axis=(2, 3)), rtol=1e-12, atol=1e-14)


def test_zero_convs_across_transitions_keep_pooled_opening_features(rng):
    model = build_network(small("5pt", "cin"), 3, zero_convs=True)
    x = rng.standard_normal((2, 2, 8, 8))
    opened = model.opening.forward(model.params, FeatureMap.from_array(x), path="reference").logical()
    feats = model.features(x)
    np.testing.assert_allclose(feats[:, :4], opened.mean(axis=(2, 3)), rtol=1e-12, atol=1e-14)
    assert not feats[:, 4:].any()


@pytest.mark.parametrize("stencil", ["9pt", "5pt", "3pt", "1x1"])
@pytest.mark.parametrize("group_rule", ["1", "cin"])
def test_blocks_match_composition_oracle(stencil, group_rule):
    rng = np.random.default_rng(7)
    model = build_network(small(stencil, group_rule), 3, seed=1)
    jitter_norms(model, rng)
    for blk in model.blocks():
        c_in = blk.norm1.channels
        y = FeatureMap.from_array(rng.standard_normal((3, c_in, 8, 8)))
        got = blk.forward(model, y, train=True)
        assert got.layout is y.layout
        want = block_oracle(model, blk, y.logical())
        assert np.max(np.abs(got.logical() - want)) <= 1e-10 * np.max(np.abs(want))


def test_three_point_block_uses_horizontal_then_vertical_and_restores_layout(rng):
    model = build_network(small("3pt", "cin"), 3)
    for blk in model.blocks():
        assert blk.k1.stencil is StencilKind.THREE_H and blk.k2.stencil is StencilKind.THREE_V
    blk = model.blocks()[0]
    y = FeatureMap.from_array(rng.standard_normal((2, 4, 6, 6)), Layout.WIDTH_FASTEST)
    assert blk.forward(model, y, train=False).layout is Layout.WIDTH_FASTEST


# --- batch norm -----------------------------------------------------------------


def bn_layer(c):
    layer = BatchNorm("n", c)
    params = {"n.scale": np.ones(c), "n.shift": np.zeros(c)}
    buffers = {"n.running_mean": np.zeros(c), "n.running_var": np.ones(c)}
    return layer, params, buffers


def test_batch_norm_constant_channel_gives_shift():
    layer, params, buffers = bn_layer(2)
    params["n.shift"] = np.array([0.3, -1.2])
    params["n.scale"] = np.array([2.0, 5.0])
    out = layer.forward(params, buffers, FeatureMap.from_array(np.full((3, 2, 4, 4), 7.0)), train=True)
    np.testing.assert_allclose(out.logical()[:, 0], 0.3, atol=1e-12)
    np.testing.assert_allclose(out.logical()[:, 1], -1.2, atol=1e-12)


def test_batch_norm_standardizes(rng):
    layer, params, buffers = bn_layer(3)
    x = 4.0 + 3.0 * rng.standard_normal((5, 3, 6, 6))
    out = layer.forward(params, buffers, FeatureMap.from_array(x), train=True).logical()
    assert np.max(np.abs(out.mean(axis=(0, 2, 3)))) < 1e-5
    assert np.max(np.abs(out.var(axis=(0, 2, 3)) - 1)) < 1e-5


def test_batch_norm_eval_converges_to_train(rng):
    layer, params, buffers = bn_layer(3)
    x = FeatureMap.from_array(2.0 + rng.standard_normal((4, 3, 5, 5)))
    for _ in range(120):
        train_out = layer.forward(params, buffers, x, train=True).logical()
    eval_out = layer.forward(params, buffers, x, train=False).logical()
    assert np.max(np.abs(eval_out - train_out)) < 1e-3


# --- downsample -----------------------------------------------------------------


def dw_spec(c, rng, zero=False):
    spec = LeanConvSpec.random(c, c, c, "5pt", rng, coupling="grouped")
    return spec.replace(pointwise=0 * spec.pointwise, spatial=0 * spec.spatial) if zero else spec


def test_downsample_examples(rng):
    x = FeatureMap.from_array(rng.standard_normal((2, 3, 6, 4)))
    out = downsample(x, dw_spec(3, rng, zero=True))
    assert out.shape == (2, 6, 3, 2)
    assert not out.logical()[:, 3:].any()
    spec = dw_spec(3, rng)
    want = np.concatenate([x.logical(), ref(spec, x.logical())], axis=1)
    want = want.reshape(2, 6, 3, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(downsample(x, spec).logical(), want, rtol=1e-12, atol=1e-14)


def test_downsample_errors(rng):
    x = FeatureMap.from_array(rng.standard_normal((1, 3, 5, 4)))
    with pytest.raises(ShapeError):
        downsample(x, dw_spec(3, rng))
    with pytest.raises(ShapeError):
        downsample(FeatureMap.zeros(1, 4, 4, 4), LeanConvSpec.zeros(4, 4, 2, "5pt"))


# --- classifier and loss --------------------------------------------------------


def test_classifier_examples(rng):
    probs = classify(rng.standard_normal((4, 6)), np.zeros((5, 6)), np.zeros(5))
    np.testing.assert_allclose(probs, 0.2)
    W, mu, y = rng.standard_normal((5, 6)), rng.standard_normal(5), 30 * rng.standard_normal((4, 6))
    probs = classify(y, W, mu)
    assert np.max(np.abs(probs.sum(axis=1) - 1)) < 1e-6
    want = np.empty((4, 5))
    for n in range(4):
        z = W @ y[n] + mu
        e = np.exp(z - z.max())
        want[n] = e / e.sum()
    np.testing.assert_allclose(probs, want, rtol=1e-12)
    with pytest.raises(ShapeError):
        classify(y, np.zeros((5, 7)), mu)


def test_cross_entropy_examples(rng):
    assert cross_entropy(np.eye(4)[[0, 2, 1]], [0, 2, 1]) == 0.0
    assert math.isclose(cross_entropy(np.full((3, 7), 1 / 7), [0, 3, 6]), math.log(7))
    probs = softmax(rng.standard_normal((5, 4)))
    labels = rng.integers(0, 4, 5)
    want = -sum(math.log(probs[n, labels[n]]) for n in range(5)) / 5
    assert math.isclose(cross_entropy(probs, labels), want, rel_tol=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(probs, [0, 1, 2, 3, 4])


# --- assembly and accounting ----------------------------------------------------


@pytest.mark.parametrize("name", ["Res18", "Res24", "Res34", "Res38-narrow"])
def test_conv_layer_count_formula(name):
    cfg = table_config(name)
    model = LeanResNet(cfg, 10)
    n_stride2 = sum(s == 2 for s in cfg.stage_strides)
    assert model.conv_layer_count() == 1 + 2 * sum(cfg.stage_steps) + n_stride2
    plain = LeanResNet(table_config(name, transition="plain"), 10)
    assert plain.conv_layer_count() == model.conv_layer_count()


@pytest.mark.parametrize("stencil", ["9pt", "5pt", "3pt", "1x1"])
@pytest.mark.parametrize("group_rule", ["1", "cin", "16", "ratio:0.125"])
def test_registry_total_equals_sum_of_parts(stencil, group_rule):
    model = LeanResNet(table_config("Res18", stencil, group_rule), 10)
    convs = sum(param_count(c.spec(model.params)) for c in model.convs())
    norms = sum(2 * n.channels for n in model.norms())
    classifier = 10 * model.out_width + 10
    assert model.param_count() == convs + norms + classifier == model.cost(32, 32).params


def test_res18_reference_counts():
    counts = {s: LeanResNet(table_config("Res18", s), 10).cost(32, 32) for s in ("9pt", "5pt", "3pt")}
    assert (counts["9pt"].params, counts["9pt"].mults) == (2_755_210, 180_709_888)
    assert (counts["5pt"].params, counts["5pt"].mults) == (1_533_706, 100_788_736)
    assert (counts["3pt"].params, counts["3pt"].mults) == (922_954, 60_828_160)


def test_group_rules():
    five = StencilKind.FIVE
    assert resolve_groups("cin", 32, 64, five) == 32
    assert resolve_groups("cin/8", 64, 64, five) == 8
    assert resolve_groups("16", 24, 24, five) == 12
    assert resolve_groups("ratio:0.125", 64, 64, five) == 32
    with pytest.raises(ValueError):
        resolve_groups("0", 8, 8, five)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig([8, 16], [1], [1, 2]).validate()
    with pytest.raises(ValueError):
        NetworkConfig([8, 16], [1, 1], [1, 3]).validate()
    with pytest.raises(ValueError):
        NetworkConfig([8, 12], [1, 1], [1, 2]).validate()
    cfg = small()
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_five_point_network_is_a_restriction_of_full9(rng):
    five = build_network(small("5pt", "1"), 3, seed=2)
    full = LeanResNet(small("9pt", "1"), 3)
    jitter_norms(five, rng)
    taps = StencilKind.FULL9.offsets
    pick = [taps.index(o) for o in StencilKind.FIVE.offsets]
    for k, v in five.params.items():
        if k.endswith(".spatial") and v.shape[2] == 4:
            full.params[k] = np.zeros(v.shape[:2] + (8,))
            full.params[k][:, :, pick] = v
        else:
            full.params[k] = v.copy()
    x = rng.standard_normal((3, 2, 8, 8))
    np.testing.assert_allclose(full.logits(x, train=True), five.logits(x, train=True), rtol=1e-10, atol=1e-12)


def test_transpose_pairs_do_not_change_three_point_logits(rng):
    model = build_network(small("3pt", "cin"), 4, seed=3)
    jitter_norms(model, rng)
    x = rng.standard_normal((2, 2, 8, 8))
    plain = model.logits(x, train=False)
    model.transpose_probe = True
    probed = model.logits(x, train=False)
    np.testing.assert_array_equal(plain, probed)


# --- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("stencil,group_rule,transition", [
    ("5pt", "cin", "branch"), ("3pt", "1", "branch"), ("9pt", "2", "plain"), ("5pt", "1", "plain"),
])
def test_network_gradients_match_central_differences(stencil, group_rule, transition):
    cfg = small(stencil, group_rule, transition=transition)
    errors = gradcheck_network(cfg, seed=4, batch=3, size=8, max_entries=6)
    assert len(errors) == len(LeanResNet(cfg, 3).params)
    assert max(errors.values()) < 1e-5


def test_grouped_coupling_network_gradients():
    errors = gradcheck_network(small("5pt", "cin", coupling="grouped"), seed=5, batch=3, max_entries=6)
    assert max(errors.values()) < 1e-5
