import numpy as np
import pytest

from sentinet import gradcheck, ops
from sentinet.errors import NumericError


@pytest.mark.parametrize("kind", sorted(gradcheck.CASES))
def test_backward_passes_match_finite_differences(kind):
    for seed in range(3):
        assert gradcheck.check_case(kind, seed) < 1e-4


def test_linear_layer_is_near_machine_precision():
    assert gradcheck.check_case("dense", 0) < 1e-7


def test_wrong_gradient_is_detected(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((2, 4))
    g = rng.standard_normal((3, 2))

    def loss(p):
        return float(np.sum(ops.dense(p["x"], p["w"], np.zeros(2)) * g))

    def bad_grad(p):
        return {"w": 2 * g.T @ p["x"]}

    assert gradcheck.finite_difference_check(loss, bad_grad, {"x": x, "w": w}) > 0.1


def test_non_finite_gradient_names_parameter():
    with pytest.raises(NumericError, match="'w'"):
        gradcheck.finite_difference_check(lambda p: 0.0, lambda p: {"w": np.array([np.nan])},
                                          {"w": np.zeros(1)})


def test_relu_case_stays_off_kink():
    rng = np.random.default_rng(5)
    _, _, inputs = gradcheck.relu_case(rng)
    assert np.min(np.abs(inputs["x"])) > 1e-5
