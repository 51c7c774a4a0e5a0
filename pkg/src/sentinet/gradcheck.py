"""Central finite differences as an oracle for the backward kernels.

Every check reduces a kernel to a scalar ``L = sum(out * G)`` with a fixed
random ``G``, so the analytic gradient is just the kernel's backward pass
fed with ``G``.  All evaluation happens in float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from sentinet import ops
from sentinet.errors import NumericError


def numeric_gradient(loss_fn: Callable[[dict], float], inputs: dict, name: str, epsilon: float):
    x = inputs[name]
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_fn(inputs)
        flat[i] = orig - epsilon
        down = loss_fn(inputs)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * epsilon)
    return grad


def finite_difference_check(loss_fn, grad_fn, inputs: dict, epsilon: float = 1e-5,
                            wrt=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(inputs) -> float`` and ``grad_fn(inputs) -> {name: grad}``.
    The relative error of one element is
    ``|a - n| / max(|a|, |n|, 1e-8)``; the max is over every element of
    every parameter in ``wrt`` (default: all keys of ``grad_fn``'s result).
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    analytic = grad_fn(inputs)
    names = list(wrt) if wrt is not None else list(analytic)
    worst = 0.0
    for name in names:
        a = np.asarray(analytic[name], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"analytic gradient of '{name}' has non-finite values")
        n = numeric_gradient(loss_fn, inputs, name, epsilon)
        if not np.all(np.isfinite(n)):
            raise NumericError(f"numeric gradient of '{name}' has non-finite values")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# --------------------------------------------------------------------------
# ready-made cases, one per layer type


def _spaced(rng, shape, gap=1e-3):
    """Random values whose pairwise gaps exceed ``gap`` (keeps argmax stable)."""
    size = int(np.prod(shape))
    vals = rng.permutation(size) * (4 * gap) + rng.uniform(0, gap, size)
    return (vals - vals.mean()).reshape(shape)


def _away_from_zero(rng, shape, margin):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def conv_case(rng, groups: int = 1):
    n = int(rng.integers(1, 3))
    cg = int(rng.integers(1, 3))
    kg = int(rng.integers(1, 3))
    c, k = cg * groups, kg * groups
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(kh, kh + 4)), int(rng.integers(kw, kw + 4))
    spec = ops.ConvSpec(k, kh, kw, stride=stride, pad=pad, groups=groups)
    inputs = {
        "x": rng.standard_normal((n, c, h, w)),
        "weight": rng.standard_normal((k, cg, kh, kw)),
        "bias": rng.standard_normal(k),
    }
    ho = ops.conv_output_size(h, kh, stride, pad)
    wo = ops.conv_output_size(w, kw, stride, pad)
    g = rng.standard_normal((n, k, ho, wo))

    def loss(p):
        return float(np.sum(ops.conv2d(p["x"], p["weight"], p["bias"], spec) * g))

    def grad(p):
        dx, dw, db = ops.conv2d_backward(g, p["x"], p["weight"], spec)
        return {"x": dx, "weight": dw, "bias": db}

    return loss, grad, inputs


def maxpool_case(rng):
    k, s = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(k, k + 5)), int(rng.integers(k, k + 5))
    spec = ops.PoolSpec(k, s)
    inputs = {"x": _spaced(rng, (n, c, h, w))}
    out, _ = ops.maxpool(inputs["x"], spec)
    g = rng.standard_normal(out.shape)

    def loss(p):
        return float(np.sum(ops.maxpool(p["x"], spec)[0] * g))

    def grad(p):
        _, arg = ops.maxpool(p["x"], spec)
        return {"x": ops.maxpool_backward(g, arg, p["x"].shape, spec)}

    return loss, grad, inputs


def lrn_case(rng, shape=(2, 6, 3, 3)):
    spec = ops.LrnSpec(n=int(rng.choice([1, 3, 5])), alpha=float(rng.uniform(0.1, 1.0)),
                       beta=float(rng.uniform(0.5, 1.0)), k=float(rng.uniform(1.0, 2.0)))
    inputs = {"x": rng.standard_normal(shape)}
    g = rng.standard_normal(shape)

    def loss(p):
        return float(np.sum(ops.lrn(p["x"], spec) * g))

    def grad(p):
        return {"x": ops.lrn_backward(g, p["x"], spec)}

    return loss, grad, inputs


def dense_case(rng):
    n, d, m = (int(v) for v in rng.integers(1, 7, size=3))
    inputs = {
        "x": rng.standard_normal((n, d)),
        "weight": rng.standard_normal((m, d)),
        "bias": rng.standard_normal(m),
    }
    g = rng.standard_normal((n, m))

    def loss(p):
        return float(np.sum(ops.dense(p["x"], p["weight"], p["bias"]) * g))

    def grad(p):
        dx, dw, db = ops.dense_backward(g, p["x"], p["weight"])
        return {"x": dx, "weight": dw, "bias": db}

    return loss, grad, inputs


def relu_case(rng, epsilon=1e-5):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
    inputs = {"x": _away_from_zero(rng, shape, 100 * epsilon)}
    g = rng.standard_normal(shape)

    def loss(p):
        return float(np.sum(ops.relu(p["x"]) * g))

    def grad(p):
        return {"x": ops.relu_backward(g, p["x"])}

    return loss, grad, inputs


def softmax_ce_case(rng, n=4, m=2):
    inputs = {"logits": rng.standard_normal((n, m)) * 2}
    labels = rng.integers(0, m, size=n)

    def loss(p):
        return ops.softmax_cross_entropy(p["logits"], labels)[0]

    def grad(p):
        _, probs = ops.softmax_cross_entropy(p["logits"], labels)
        return {"logits": ops.softmax_cross_entropy_backward(probs, labels)}

    return loss, grad, inputs


def hinge_case(rng, n=6, d=4):
    """Linear SVM objective; features are re-drawn until every margin is off the kink."""
    reg = float(rng.uniform(0.01, 1.0))
    labels = rng.choice([-1, 1], size=n)
    while True:
        x = rng.standard_normal((n, d))
        w = rng.standard_normal(d) * 0.5
        b = rng.standard_normal(1) * 0.5
        if np.all(np.abs(1 - labels * (x @ w + b)) > 0.01):
            break
    inputs = {"weight": w, "bias": b}

    def loss(p):
        return ops.hinge_loss(x @ p["weight"] + p["bias"], labels, p["weight"], reg)[0]

    def grad(p):
        _, ds, dw = ops.hinge_loss(x @ p["weight"] + p["bias"], labels, p["weight"], reg)
        return {"weight": x.T @ ds + dw, "bias": np.array([ds.sum()])}

    return loss, grad, inputs


CASES = {
    "conv2d": lambda rng: conv_case(rng, groups=1),
    "conv2d_groups2": lambda rng: conv_case(rng, groups=2),
    "maxpool": maxpool_case,
    "lrn": lrn_case,
    "dense": dense_case,
    "relu": relu_case,
    "softmax_cross_entropy": softmax_ce_case,
    "hinge": hinge_case,
}


def check_case(kind: str, seed: int, epsilon: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    loss, grad, inputs = CASES[kind](rng)
    return finite_difference_check(loss, grad, inputs, epsilon)
