import numpy as np
import pytest

from sentinet import net
from sentinet.errors import DimensionError, SpecError, SurgeryError, TransferError


@pytest.fixture(scope="module")
def full():
    return net.build_template("full", 2)


@pytest.fixture(scope="module")
def mini():
    return net.build_template("mini", 2)


def test_full_template_shapes(full):
    shapes = net.infer_shapes(full)
    assert shapes["conv1"] == (96, 55, 55)
    assert shapes["pool1"] == (96, 27, 27)
    assert shapes["pool2"] == (256, 13, 13)
    assert shapes["pool5"] == (256, 6, 6)
    assert shapes["fc8"] == (2,)
    assert net.param_shapes(full)["fc6.weight"] == (4096, 9216)


def test_full_template_at_451(full):
    assert net.infer_shapes(full, (3, 451, 451))["pool5"] == (256, 13, 13)


def test_too_small_input_names_layer(full):
    with pytest.raises(DimensionError, match="conv1|pool"):
        net.infer_shapes(full, (3, 10, 10))


def test_pool_precedes_norm(full):
    names = [l.name for l in full.layers]
    for i in (1, 2):
        assert names.index(f"conv{i}") < names.index(f"pool{i}") < names.index(f"norm{i}")


def test_mini_template(mini):
    assert mini.input_shape == (3, 63, 63)
    assert net.total_stride(mini) == 16
    assert net.infer_shapes(mini)["fc8"] == (2,)
    widths = [l.spec.out_channels for l in mini.layers if l.kind == "conv"]
    assert widths == [8, 16, 24, 24, 16]


def test_total_stride_full(full):
    assert net.total_stride(full) == 32


def test_param_counts(full):
    _, per = net.param_count(full)
    assert per["fc7"] == 16_781_312
    assert per["fc6"] == 37_752_832
    assert per["pool1"] == 0 and per["norm1"] == 0 and per["relu1"] == 0
    assert per["conv2"] == 256 * 48 * 25 + 256


def test_surgery_arithmetic(full):
    total = net.param_count(net.apply_variant(full, "full"))[0]
    assert total - net.param_count(net.apply_variant(full, "fc7-2"))[0] == 16_781_312
    assert total - net.param_count(net.apply_variant(full, "fc6-2"))[0] == 54_523_904


def test_variants_structure(full):
    v = net.apply_variant(full, "fc7-2")
    names = [l.name for l in v.layers]
    assert "fc7" not in names and "relu7" not in names and names[-2] == "fc7_twitter"
    v = net.apply_variant(full, "fc6-2")
    assert net.infer_shapes(v)["fc6_twitter"] == (2,)
    assert [l.name for l in v.layers][-3:] == ["pool5", "fc6_twitter", "prob"]


def test_fc9_extended_keeps_fc8_width():
    src = net.build_template("full", 1000)
    v = net.apply_variant(src, "fc9-extended")
    shapes = net.param_shapes(v)
    assert shapes["fc8.weight"] == (1000, 4096)
    assert shapes["fc9_twitter.weight"] == (2, 1000)


def test_apply_variant_is_pure(full):
    before = full.to_json()
    net.apply_variant(full, "fc6-2")
    assert full.to_json() == before


def test_surgery_errors(mini):
    with pytest.raises(SurgeryError):
        net.apply_variant(mini, "fc5-2")
    ablated = net.apply_variant(mini, "fc6-2")
    with pytest.raises(SurgeryError, match="fc6"):
        net.apply_variant(ablated, "fc7-2")


def test_architecture_validation(mini):
    layers = list(mini.layers)
    with pytest.raises(SpecError, match="duplicate"):
        net.Architecture(tuple(layers + [layers[0]]), mini.input_shape, 2)
    with pytest.raises(SpecError, match="class_count"):
        net.Architecture(mini.layers, mini.input_shape, 3)


def test_architecture_json_round_trip(full):
    assert net.Architecture.from_dict(full.to_dict()) == full


def test_init_statistics():
    arch = net.apply_variant(net.build_template("full", 1000), "full")
    model = net.init_weights(arch, 0, policy="gaussian")
    w = model.params["fc7.weight"]
    assert abs(float(w.var()) - 1e-4) < 1e-5
    assert all(not model.params[k].any() for k in model.params if k.endswith(".bias"))


def test_scratch_init_is_fan_in_scaled(mini):
    model = net.init_weights(mini, 0)
    w = model.params["fc6.weight"]
    assert abs(w.std() - np.sqrt(2 / w.shape[1])) < 0.1 * np.sqrt(2 / w.shape[1])


def test_init_deterministic(mini):
    a, b = net.init_weights(mini, 3), net.init_weights(mini, 3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = net.init_weights(mini, 4)
    assert not np.array_equal(a.params["conv1.weight"], c.params["conv1.weight"])


def test_transfer_full_variant(mini):
    src = net.init_weights(net.build_template("mini", 10), 1)
    target = net.apply_variant(src.architecture, "full")
    model, fresh = net.transfer_weights(src, target, source_name="objects")
    assert fresh == ["fc8_twitter"]
    assert model.provenance == "transferred-from:objects"
    assert np.array_equal(model.params["fc7.weight"], src.params["fc7.weight"])
    assert model.architecture.layer("fc8_twitter").lr_mult == 10.0
    assert model.architecture.layer("fc7").lr_mult == 1.0


def test_transfer_fc9(mini):
    src = net.init_weights(net.build_template("mini", 10), 1)
    model, fresh = net.transfer_weights(src, net.apply_variant(src.architecture, "fc9-extended"))
    assert fresh == ["fc9_twitter"]
    assert np.array_equal(model.params["fc8.weight"], src.params["fc8.weight"])


def test_transfer_identity_reproduces_logits(mini, rng):
    src = net.init_weights(mini, 2)
    model, fresh = net.transfer_weights(src, mini)
    assert fresh == []
    x = rng.standard_normal((2, 3, 63, 63)).astype(np.float32)
    assert np.array_equal(net.forward(src, x)[0], net.forward(model, x)[0])


def test_transfer_shape_mismatch(mini):
    src = net.init_weights(mini, 0)
    other = net.build_template("mini", 3)
    with pytest.raises(TransferError, match="fc8"):
        net.transfer_weights(src, other)


def test_forward_capture(mini, rng):
    model = net.init_weights(mini, 0)
    x = rng.standard_normal((2, 3, 63, 63)).astype(np.float32)
    logits, cap = net.forward(model, x, mini.capturable)
    assert len(cap) == 13
    assert np.array_equal(cap["fc8"], logits)
    assert np.all(cap["conv1"] >= 0) and np.all(cap["fc7"] >= 0)
    assert net.forward(model, x)[1] == {}
    with pytest.raises(KeyError, match="conv9"):
        net.forward(model, x, ["conv9"])


def test_full_template_captures_13_layers(full):
    assert full.capturable == ["conv1", "pool1", "norm1", "conv2", "pool2", "norm2", "conv3",
                               "conv4", "conv5", "pool5", "fc6", "fc7", "fc8"]


def test_forward_rejects_wrong_shape(mini):
    model = net.init_weights(mini, 0)
    with pytest.raises(DimensionError):
        net.forward(model, np.zeros((1, 3, 64, 64), np.float32))


def test_backward_matches_finite_difference(mini):
    """Whole-network gradient on one parameter entry, in float64."""
    from sentinet import ops
    model = net.init_weights(mini, 0)
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    model = net.Model(mini, params)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 63, 63))
    y = np.array([0, 1])
    logits, caches = net.forward_with_cache(model, x)
    _, probs = ops.softmax_cross_entropy(logits, y)
    grads = net.backward(model, caches, ops.softmax_cross_entropy_backward(probs, y))
    for key, idx in [("fc7.weight", (3, 5)), ("conv3.bias", (2,)), ("conv1.weight", (1, 0, 2, 2))]:
        eps = 1e-6
        orig = params[key][idx]
        params[key][idx] = orig + eps
        up = ops.softmax_cross_entropy(net.forward(model, x)[0], y)[0]
        params[key][idx] = orig - eps
        down = ops.softmax_cross_entropy(net.forward(model, x)[0], y)[0]
        params[key][idx] = orig
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - grads[key][idx]) <= 1e-4 * max(abs(numeric), 1e-6)
