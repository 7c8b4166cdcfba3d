import math

import numpy as np
import pytest

from bitsift import autograd as ag
from bitsift.autograd import ShapeError
from bitsift.bitrep import represented_weights
from bitsift.models import ModelSpec, attach_bsq, build_model, fix_precisions
from bitsift.pipeline import adjust_model


def mlp(rng, dims=(16, 32, 8, 4), **kw):
    spec = ModelSpec("mlp", (dims[0],), dims[-1], tuple(dims[1:-1]), **kw)
    return build_model(spec, rng)


def resnet(rng, **kw):
    spec = ModelSpec("resnet", (1, 8, 8), 3, (4, 8), blocks_per_stage=1, **kw)
    return build_model(spec, rng)


# -- construction ------------------------------------------------------------

def test_mlp_784_10_param_count(rng):
    model = build_model(ModelSpec("mlp", (784,), 10, ()), rng)
    assert len(model.layers) == 1
    assert model.num_parameters() == 7850
    assert model.quantizable_param_count() == 7840 and model.other_param_count() == 10


def test_param_accounting_excludes_bias_and_batchnorm(rng):
    model = resnet(rng)
    weights = sum(v.size for k, v in model.parameters().items() if k.endswith(".weight"))
    assert model.quantizable_param_count() == weights
    q = attach_bsq(model, 4)
    assert sum(s.param_count for s in q.layer_stats()) == weights
    assert q.other_param_count() == model.other_param_count()  # 4-bit activations: ReLU6, no clip
    low = attach_bsq(resnet(rng, act_bits=3, first_last_act_bits=None), 4)
    assert low.other_param_count() == model.other_param_count() + len(low.layers) - 1  # one PACT clip each


def test_fan_in_scaled_init(rng):
    model = build_model(ModelSpec("mlp", (2000,), 2, (500,)), rng)
    w = model.layers[0].weight
    assert np.std(w) == pytest.approx(math.sqrt(2 / 2000), rel=0.02)
    assert not model.layers[0].bias.any()


@pytest.mark.parametrize("kwargs", [
    dict(arch="vgg"), dict(num_classes=1), dict(n0=0), dict(widths=(0,)),
    dict(arch="cnn", input_shape=(64,)), dict(arch="resnet", input_shape=(1, 8, 8), widths=(8, 4)),
    dict(arch="resnet", input_shape=(1, 8, 8), widths=(4, 7)),
])
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(ValueError):
        ModelSpec(**kwargs)


def test_forward_rejects_wrong_batch_shape(rng):
    model = mlp(rng)
    with pytest.raises(ShapeError):
        model.predict(np.zeros((2, 15)))
    with pytest.raises(ShapeError):
        resnet(rng).predict(np.zeros((2, 1, 8, 9)))
    with pytest.raises(ShapeError):
        model.predict(np.zeros((0, 16)))


# -- zero-input oracles --------------------------------------------------------

def test_zero_image_mlp_gives_uniform_cross_entropy(rng):
    model = mlp(rng, act_bits=None)
    logits, _ = model.forward(np.zeros((1, 16)))
    assert np.all(logits.value == logits.value[0, 0])
    ce = float(ag.cross_entropy(logits, np.array([2])).value)
    assert ce == pytest.approx(math.log(4), abs=1e-12)


def test_cnn_zero_image_logits_equal_bias_chain(rng):
    spec = ModelSpec("cnn", (1, 8, 8), 5, (4, 6), batchnorm=False, act_bits=None)
    model = build_model(spec, rng)
    for layer in model.layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    # hand trace: a zero image through conv0 is its bias everywhere, relu, then conv1
    # sees a constant map; with padding 1 the border taps see zeros, so trace directly
    conv0, conv1, fc = model.layers
    h0 = np.maximum(conv0.bias, 0)[None, :, None, None] * np.ones((1, 4, 8, 8))
    hp = np.pad(h0, ((0, 0), (0, 0), (1, 1), (1, 1)))
    h1 = np.zeros((1, 6, 4, 4))
    for o in range(6):
        for i in range(4):
            for j in range(4):
                h1[0, o, i, j] = (hp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * conv1.weight[o]).sum() + conv1.bias[o]
    pooled = np.maximum(h1, 0).mean(axis=(2, 3))
    expected = pooled @ fc.weight.T + fc.bias
    assert np.allclose(model.predict(np.zeros((1, 1, 8, 8))), expected, rtol=1e-12, atol=1e-12)


def test_cnn_zero_weights_give_fc_bias(rng):
    model = build_model(ModelSpec("cnn", (1, 8, 8), 3, (4,), batchnorm=True, act_bits=None), rng)
    model.layers[-1].bias[:] = [0.5, -1.0, 2.0]
    assert np.array_equal(model.predict(np.zeros((1, 1, 8, 8))), [[0.5, -1.0, 2.0]])


# -- residual shortcut -------------------------------------------------------

def test_resnet_zeroed_block_still_gives_logits_and_gradients(rng):
    model = resnet(rng)
    for lid in ("s0b0c1", "s0b0c2"):
        model.layer(lid).weight[:] = 0.0
    x = rng.normal(size=(6, 1, 8, 8))
    logits, params = model.forward(x, training=True)
    assert np.all(np.isfinite(logits.value))
    grads = ag.backward(ag.cross_entropy(logits, np.array([0, 1, 2, 0, 1, 2])))
    assert np.abs(grads[params["stem.weight"].id]).sum() > 0


def test_resnet_zero_bit_block_forward(rng):
    q = attach_bsq(resnet(rng), 6)
    for lid in ("s1b0c1", "s1b0c2"):
        bt = q.layer(lid).bit_state
        bt.pos[:] = 0.0
        bt.neg[:] = 0.0
    adjust_model(q, 0)
    assert q.layer("s1b0c1").precision == 0
    x = rng.normal(size=(4, 1, 8, 8))
    logits, params = q.forward(x, training=True)
    assert np.all(np.isfinite(logits.value))
    grads = ag.backward(ag.cross_entropy(logits, np.array([0, 1, 2, 0])))
    assert np.abs(grads[params["stem.pos"].id]).sum() > 0


# -- attach_bsq --------------------------------------------------------------

def test_attach_bsq_plane_counts(rng):
    q = attach_bsq(resnet(rng), 8)
    for layer in q.layers:
        assert layer.mode == "bsq"
        assert layer.bit_state.pos.shape[0] == 8 and layer.bit_state.neg.shape[0] == 8
        assert layer.weight is None


def test_attach_bsq_leaves_source_untouched(rng):
    model = mlp(rng)
    before = model.layers[0].weight.copy()
    attach_bsq(model, 4)
    assert model.layers[0].mode == "float" and np.array_equal(model.layers[0].weight, before)


def test_first_last_activation_precision(rng):
    q = attach_bsq(build_model(ModelSpec("mlp", (16,), 4, (8, 8, 8), act_bits=3, first_last_act_bits=8), rng))
    bits = [l.act_quantizer.n_act for l in q.layers[:-1]]
    kinds = [l.act_quantizer.kind for l in q.layers[:-1]]
    assert bits == [8, 3, 8] and kinds == ["relu6-uniform", "pact", "relu6-uniform"]
    assert q.layers[-1].act_quantizer is None


def test_quantization_error_shrinks_with_n0(rng):
    model = mlp(rng, act_bits=None, first_last_act_bits=None)
    x = rng.normal(size=(32, 16))
    ref = model.predict(x)
    errs = [np.abs(attach_bsq(model, n0).predict(x) - ref).max() for n0 in (4, 8, 16)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3


def test_attach_then_adjust_is_invariant(rng):
    q = attach_bsq(mlp(rng), 8)
    x = rng.normal(size=(8, 16))
    before = q.predict(x)
    reports = adjust_model(q, 0, x)
    assert np.array_equal(q.predict(x), before)
    for _, rep in reports:
        # fresh planes: only an empty MSB of the widened code can go, plus common trailing zeros
        assert rep.n_after <= 8


# -- forward invariance ------------------------------------------------------

def test_frozen_batch_logits_bitwise_unchanged_across_adjustment(rng):
    q = attach_bsq(mlp(rng), 6)
    for layer in q.layers:
        bt = layer.bit_state
        bt.pos[:] = np.clip(bt.pos + rng.uniform(-0.4, 0.4, bt.pos.shape), 0, 2)
        bt.neg[:] = np.clip(bt.neg + rng.uniform(-0.4, 0.4, bt.neg.shape), 0, 2)
    x = rng.normal(size=(16, 16))
    before = q.predict(x)
    adjust_model(q, 0, x)
    assert np.array_equal(q.predict(x), before)


def test_removing_zero_bit_layer_contribution(rng):
    model = build_model(ModelSpec("resnet", (1, 8, 8), 3, (4,), blocks_per_stage=2, act_bits=None,
                                  first_last_act_bits=None), rng)
    fixed = fix_precisions(model, {l.layer_id: (0 if l.layer_id == "s0b1c2" else 32) for l in model.layers})
    assert not fixed.layer("s0b1c2").weight.any()
    # a zero conv feeds a batchnorm whose output is beta only; with beta = 0 the block is the identity
    x = rng.normal(size=(3, 1, 8, 8))
    assert np.all(np.isfinite(fixed.predict(x)))
    assert not fixed.layer("s0b1c2").effective_weight().any()


def test_forward_deterministic(rng):
    q = attach_bsq(resnet(rng), 5)
    x = rng.normal(size=(3, 1, 8, 8))
    assert np.array_equal(q.predict(x), q.copy().predict(x))


def test_fix_precisions_checks_layers(rng):
    model = mlp(rng)
    with pytest.raises(ValueError):
        fix_precisions(model, {"fc0": 4})
    with pytest.raises(ValueError):
        fix_precisions(model, {"fc0": -1, "fc1": 4, "fc2": 4})


def test_fix_precisions_starts_from_represented_weights(rng):
    q = attach_bsq(mlp(rng), 5)
    fixed = fix_precisions(q, {l.layer_id: 5 for l in q.layers})
    for a, b in zip(q.layers, fixed.layers):
        assert np.array_equal(b.weight, represented_weights(a.bit_state)) and b.bits == 5
