import numpy as np
import pytest

from app.core.attention import AttentionKind
from app.core.models import ArchSpec, LayerSpec
from app.core.network import (
    ARCHITECTURES,
    ConvLayer,
    OrientationPool,
    arch_spec,
    build_model,
    count_parameters,
    parameter_breakdown,
)
from app.core.tensor import finite_diff_grad, relative_error, rotate90


@pytest.mark.parametrize("plain, attended, delta", [("p4cnn", "a-p4cnn", 4 * 8 * 4), ("p4mcnn", "a-p4mcnn", 4 * 8 * 8)])
def test_attention_parameter_deltas(plain, attended, delta):
    assert count_parameters(build_model(attended, seed=0)) - count_parameters(build_model(plain, seed=0)) == delta


def test_parameter_breakdown_sums_to_count():
    model = build_model("a-p4cnn", seed=0, channels=2)
    breakdown = parameter_breakdown(model)
    assert sum(breakdown.values()) == count_parameters(model)
    assert breakdown["gconv1.attention"] == 2 * 4
    assert breakdown["dense.weights"] == 10 * 2


def test_z2cnn_is_planar():
    model = build_model("z2cnn", seed=0, channels=2)
    assert model.spec.group_size == 1
    assert not any(isinstance(layer, OrientationPool) for _, layer in model.layers)
    assert not model.attention_keys()
    assert model.arch.attended_layers == 0


def test_attended_variants_attend_every_convolution():
    for name, (_, attended) in ARCHITECTURES.items():
        model = build_model(name, seed=0, channels=2)
        conv_layers = model.conv_layers()
        assert len(conv_layers) == 4
        assert all(layer.attended == attended for _, layer in conv_layers)


def test_unknown_architecture():
    with pytest.raises(ValueError, match="Unknown architecture"):
        arch_spec("resnet")
    with pytest.raises(ValueError, match="Unknown architecture"):
        build_model("p6cnn", seed=0)


def test_builds_are_seed_deterministic():
    first = build_model("a-p4mcnn", seed=7, channels=2).parameters()
    second = build_model("a-p4mcnn", seed=7, channels=2).parameters()
    other = build_model("a-p4mcnn", seed=8, channels=2).parameters()
    assert first.keys() == second.keys()
    for key in first:
        np.testing.assert_array_equal(first[key], second[key])
    assert not np.array_equal(first["lift.filters"], other["lift.filters"])


@pytest.mark.parametrize("name", ["a-p4cnn", "a-p4mcnn"])
def test_attention_starts_with_a_unit_diagonal(name):
    model = build_model(name, seed=3, channels=2)
    for _, layer in model.conv_layers():
        for params in layer.attention():
            np.testing.assert_array_equal(np.diag(params.atilde), 1.0)


@pytest.mark.parametrize("name, size", [("a-p4cnn", 4), ("a-p4mcnn", 8)])
def test_identity_attention_init(name, size):
    model = build_model(name, seed=3, channels=2, attention_init="identity")
    plain = build_model(name.removeprefix("a-"), seed=3, channels=2)
    for key in model.attention_keys():
        np.testing.assert_array_equal(model.parameters()[key], np.tile(np.eye(size)[0], (2, 1)))
    for _, layer in model.conv_layers():
        for params in layer.attention():
            np.testing.assert_array_equal(params.atilde, np.eye(size))
    # the attention stream is separate, so every other tensor matches the plain network
    for key, value in plain.parameters().items():
        np.testing.assert_array_equal(model.parameters()[key], value)


def test_full_attention_variant():
    model = build_model(arch_spec("a-p4cnn", channels=2, attention_kind=AttentionKind.FULL), seed=0)
    assert model.parameters()["lift.attention"].shape == (2, 16)
    for params in model.conv_layers()[0][1].attention():
        np.testing.assert_array_equal(np.diag(params.atilde), 1.0)


def test_filters_follow_he_scale():
    model = build_model("p4cnn", seed=0, channels=8)
    filters = model.parameters()["gconv2.filters"]
    fan_in = 8 * 4 * 3 * 3
    assert filters.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.15)
    np.testing.assert_array_equal(model.parameters()["gconv2.bias"], 0.0)


def test_forward_shapes(rng):
    images = rng.uniform(size=(3, 1, 8, 8))
    model = build_model("a-p4mcnn", seed=0, channels=2)
    assert model.forward(images).shape == (3, 10)
    features = model.features(images)
    assert features.data.shape == (3, 8, 2, 4, 4)
    assert len(model.equivariant_prefix()) == 9


@pytest.mark.parametrize("name", ["p4cnn", "a-p4cnn", "p4mcnn", "a-p4mcnn"])
def test_logits_are_rotation_invariant(name, rng):
    images = rng.uniform(size=(2, 1, 8, 8))
    model = build_model(name, seed=1, channels=2)
    reference = model.forward(images)
    for k in range(1, 4):
        np.testing.assert_allclose(model.forward(rotate90(images, k)), reference, atol=1e-6)


def test_load_parameters_round_trip_and_mismatch():
    source = build_model("a-p4cnn", seed=1, channels=2)
    target = build_model("a-p4cnn", seed=2, channels=2)
    target.load_parameters({key: value.copy() for key, value in source.parameters().items()})
    for key, value in source.parameters().items():
        np.testing.assert_array_equal(target.parameters()[key], value)

    values = {key: value.copy() for key, value in source.parameters().items()}
    del values["lift.attention"]
    with pytest.raises(ValueError, match="missing"):
        target.load_parameters(values)
    with pytest.raises(ValueError, match="Parameter names differ"):
        build_model("p4cnn", seed=0, channels=2).load_parameters(source.parameters())
    values = {key: value.copy() for key, value in source.parameters().items()}
    values["dense.bias"] = np.zeros(3)
    with pytest.raises(ValueError, match="dense.bias: expected shape"):
        target.load_parameters(values)


def test_conv_layer_checks_attention_shape(p4):
    layer = build_model("p4cnn", seed=0, channels=2).conv_layers()[1][1]
    with pytest.raises(ValueError, match="Attention parameters must have shape"):
        ConvLayer(layer.params, p4, lifting=False, attention_kind=AttentionKind.CIRCULANT, theta=np.ones((2, 3)))


def test_arch_spec_validation():
    with pytest.raises(ValueError, match="attention can only follow"):
        ArchSpec(
            name="bad", group="p4", layers=[LayerSpec(kind="relu", attention=True)], attention_kind="circulant"
        )
    with pytest.raises(ValueError, match="need an attention_kind"):
        ArchSpec(name="bad", group="p4", layers=[LayerSpec(kind="lift", channels=2, attention=True)])
    with pytest.raises(ValueError, match="odd"):
        ArchSpec(name="bad", group="p4", kernel=4, layers=[])


@pytest.mark.parametrize("name", ["z2cnn", "a-p4cnn", "a-p4mcnn"])
def test_model_gradients_match_finite_differences(name, rng):
    images = rng.uniform(size=(2, 1, 4, 4))
    model = build_model(name, seed=5, channels=2)
    upstream = rng.normal(size=(2, 10))
    model.forward(images)
    model.backward(upstream)
    analytic = {key: value.copy() for key, value in model.gradients().items()}
    assert analytic.keys() == model.parameters().keys()

    for key, target in model.parameters().items():
        original = target.copy()

        def loss(values):
            target[...] = values
            return float((model.forward(images) * upstream).sum())

        numeric = finite_diff_grad(loss, original, eps=1e-6)
        target[...] = original
        assert relative_error(analytic[key], numeric) < 1e-4, key
