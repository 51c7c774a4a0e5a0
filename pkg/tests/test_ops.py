import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sentinet import ops
from sentinet.errors import DimensionError, NumericError, SpecError
from sentinet.ops import ConvSpec, LrnSpec, PoolSpec


def test_conv1_full_scale_shape():
    x = np.zeros((1, 3, 227, 227), np.float32)
    w = np.zeros((96, 3, 11, 11), np.float32)
    out = ops.conv2d(x, w, np.zeros(96, np.float32), ConvSpec(96, 11, 11, stride=4))
    assert out.shape == (1, 96, 55, 55)


def test_conv_zero_input_gives_bias(rng):
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    b = np.array([1.5, -2.0, 0.0, 3.25], np.float32)
    out = ops.conv2d(np.zeros((2, 2, 5, 5), np.float32), w, b, ConvSpec(4, 3, 3, pad=1))
    assert np.all(out == b[None, :, None, None])


def test_conv_backward_zero_upstream(rng):
    x = rng.standard_normal((2, 4, 6, 6))
    w = rng.standard_normal((6, 2, 3, 3))
    spec = ConvSpec(6, 3, 3, stride=2, pad=1, groups=2)
    dout = np.zeros((2, 6, 3, 3))
    dx, dw, db = ops.conv2d_backward(dout, x, w, spec)
    assert not dx.any() and not dw.any() and not db.any()


@settings(max_examples=40, deadline=None)
@given(h=st.integers(3, 12), w=st.integers(3, 12), k=st.integers(1, 3), s=st.integers(1, 3),
       p=st.integers(0, 2), g=st.sampled_from([1, 2]))
def test_conv_matches_reference(h, w, k, s, p, g):
    rng = np.random.default_rng(h * 100 + w)
    x = rng.standard_normal((2, 4, h, w))
    wt = rng.standard_normal((4, 4 // g, k, k))
    b = rng.standard_normal(4)
    spec = ConvSpec(4, k, k, stride=s, pad=p, groups=g)
    out = ops.conv2d(x, wt, b, spec)
    assert out.shape[2] == (h + 2 * p - k) // s + 1
    assert out.shape[3] == (w + 2 * p - k) // s + 1
    np.testing.assert_allclose(out, ops.conv2d_reference(x, wt, b, spec), atol=1e-10)


def test_groups_are_independent_convolutions(rng):
    x = rng.standard_normal((1, 4, 7, 7))
    w = rng.standard_normal((6, 2, 3, 3))
    b = rng.standard_normal(6)
    out = ops.conv2d(x, w, b, ConvSpec(6, 3, 3, groups=2))
    lo = ops.conv2d(x[:, :2], w[:3], b[:3], ConvSpec(3, 3, 3))
    hi = ops.conv2d(x[:, 2:], w[3:], b[3:], ConvSpec(3, 3, 3))
    np.testing.assert_allclose(out, np.concatenate([lo, hi], axis=1), atol=1e-12)


def test_conv_errors():
    x = np.zeros((1, 3, 5, 5))
    with pytest.raises(SpecError):
        ConvSpec(5, 3, 3, groups=2)
    with pytest.raises(SpecError):
        ops.conv2d(x, np.zeros((4, 1, 3, 3)), np.zeros(4), ConvSpec(4, 3, 3, groups=2))
    with pytest.raises(DimensionError, match="axis"):
        ops.conv2d(x, np.zeros((4, 3, 7, 7)), np.zeros(4), ConvSpec(4, 7, 7))


def test_thread_count_does_not_change_results(monkeypatch, rng):
    x = rng.standard_normal((40, 3, 9, 9)).astype(np.float32)
    w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
    b = np.zeros(5, np.float32)
    monkeypatch.setenv("SENTINET_THREADS", "0")
    seq = ops.conv2d(x, w, b, ConvSpec(5, 3, 3))
    monkeypatch.setenv("SENTINET_THREADS", "4")
    par = ops.conv2d(x, w, b, ConvSpec(5, 3, 3))
    assert np.array_equal(seq, par)


@pytest.mark.parametrize("size,out", [(55, 27), (13, 6), (27, 13)])
def test_pool_sizes(size, out):
    y, _ = ops.maxpool(np.zeros((1, 1, size, size)), PoolSpec(3, 2))
    assert y.shape == (1, 1, out, out)


def test_pool_kernel_too_large():
    with pytest.raises(DimensionError):
        ops.maxpool(np.zeros((1, 1, 2, 2)), PoolSpec(3, 2))


def test_pool_constant_input_routes_to_first_index():
    x = np.full((1, 1, 3, 3), 2.0)
    y, arg = ops.maxpool(x, PoolSpec(3, 2))
    assert y.item() == 2.0 and arg.item() == 0
    dx = ops.maxpool_backward(np.ones_like(y), arg, x.shape, PoolSpec(3, 2))
    assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 10), k=st.integers(1, 3), s=st.integers(1, 3), seed=st.integers(0, 99))
def test_pool_backward_conserves_mass(h, k, s, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, h, h))
    y, arg = ops.maxpool(x, PoolSpec(k, s))
    dout = rng.standard_normal(y.shape)
    dx = ops.maxpool_backward(dout, arg, x.shape, PoolSpec(k, s))
    assert np.isclose(dx.sum(), dout.sum())


def test_lrn_all_ones_interior():
    y = ops.lrn(np.ones((1, 8, 1, 1)), LrnSpec(5, 1e-4, 0.75, 2.0))
    # interior channel: the window of 5 sees five ones, alpha/n * 5 = alpha
    assert np.isclose(y[0, 4, 0, 0], 1 / (2 + 1e-4) ** 0.75)
    # the quoted 0.59459 is approximate; the exact value is 0.594581...
    assert abs(float(y[0, 4, 0, 0]) - 0.59459) < 2e-5


def test_lrn_alpha_zero(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    np.testing.assert_allclose(ops.lrn(x, LrnSpec(3, 0.0, 0.75, 2.0)), x / 2 ** 0.75)


def test_lrn_edge_window_is_clipped():
    x = np.ones((1, 3, 1, 1))
    spec = LrnSpec(5, 1.0, 1.0, 1.0)
    y = ops.lrn(x, spec)
    # channel 0 sees channels 0..2, channel 1 sees 0..2 as well (window clipped)
    np.testing.assert_allclose(y[0, :, 0, 0], 1 / (1 + 3 / 5))


def test_lrn_spec_validation():
    with pytest.raises(SpecError):
        LrnSpec(n=4)


def test_relu_examples():
    x = np.array([-3.0, 0.0, 2.0])
    assert ops.relu(x).tolist() == [0, 0, 2]
    assert ops.relu_backward(np.ones(3), x).tolist() == [0, 0, 1]
    neg = -np.ones((2, 3))
    assert not ops.relu(neg).any() and not ops.relu_backward(np.ones((2, 3)), neg).any()


def test_dense_identity(rng):
    x = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(ops.dense(x, np.eye(5), np.zeros(5)), x)


def test_dense_dimension_mismatch():
    with pytest.raises(DimensionError):
        ops.dense(np.zeros((2, 4)), np.zeros((3, 5)), np.zeros(3))


def test_softmax_ce_uniform():
    loss, probs = ops.softmax_cross_entropy(np.zeros((4, 2)), np.array([0, 1, 0, 1]))
    assert np.isclose(loss, np.log(2))
    np.testing.assert_allclose(probs, 0.5)


def test_softmax_is_shift_invariant(rng):
    z = rng.standard_normal((3, 4))
    np.testing.assert_allclose(ops.softmax(z), ops.softmax(z + 1000.0), atol=1e-12)


def test_softmax_ce_bad_label():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(np.zeros((2, 2)), np.array([0, 2]))


def test_hinge_values():
    loss, ds, _ = ops.hinge_loss(np.array([2.0, 0.5, -1.0]), np.array([1, 1, 1]))
    assert np.isclose(loss, (0 + 0.5 + 2.0) / 3)
    np.testing.assert_allclose(ds, [0, -1 / 3, -1 / 3])
    # exactly at the hinge the subgradient is 0
    _, ds, _ = ops.hinge_loss(np.array([1.0]), np.array([1]))
    assert ds[0] == 0


def test_hinge_penalty():
    w = np.array([3.0, 4.0])
    loss, _, dw = ops.hinge_loss(np.array([5.0]), np.array([1]), w, reg_strength=0.1)
    assert np.isclose(loss, 0.5 * 0.1 * 25)
    np.testing.assert_allclose(dw, 0.1 * w)


def test_check_finite():
    with pytest.raises(NumericError, match="conv3"):
        ops.check_finite("conv3", np.array([1.0, np.nan]))
