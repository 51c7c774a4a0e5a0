"""SGD with momentum, step learning-rate decay and test-time oversampling."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sentinet import net, ops
from sentinet.data import LabeledImages, oversample_views
from sentinet.errors import DimensionError, NumericError, SpecError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """SGD schedule with desk-scale defaults.

    On the mini template 0.01 diverges and 0.001 occasionally kills enough
    ReLUs to stall training, so the default base rate is 0.0005.
    """

    base_lr: float = 0.0005
    momentum: float = 0.9
    gamma: float = 0.1
    step_epochs: int = 10
    total_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.base_lr <= 0:
            raise SpecError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise SpecError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 < self.gamma <= 1:
            raise SpecError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch_size < 1 or self.step_epochs < 1 or self.total_epochs < 0:
            raise SpecError("batch_size and step_epochs must be >= 1, total_epochs >= 0")


# Full-scale fine-tuning schedule; fc6-2 needed a 10x smaller base rate.
FULL_SCALE_PRESET = SolverConfig(base_lr=0.001, momentum=0.9, gamma=0.1, step_epochs=6,
                            total_epochs=65, batch_size=256)
FC6_2_PRESET = replace(FULL_SCALE_PRESET, base_lr=0.0001)


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)  # (iteration, epoch, loss)
    train_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list, compare=False)

    def first_epoch_reaching(self, accuracy: float) -> int | None:
        """1-based count of epochs after which train accuracy first reached ``accuracy``."""
        for i, acc in enumerate(self.train_accuracy):
            if acc >= accuracy:
                return i + 1
        return None

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "epoch", "loss"])
            for it, ep, loss in self.iterations:
                w.writerow([it, ep, f"{loss:.6f}"])


def lr_at(config: SolverConfig, epoch: int, lr_mult: float = 1.0) -> float:
    return config.base_lr * config.gamma ** (epoch // config.step_epochs) * lr_mult


def sgd_update(param, gradient, velocity, lr: float, momentum: float):
    """v' = momentum * v - lr * g ; w' = w + v'."""
    if param.shape != gradient.shape or param.shape != velocity.shape:
        raise DimensionError(
            f"sgd_update shapes differ: param {param.shape}, gradient {gradient.shape}, velocity {velocity.shape}"
        )
    dt = param.dtype.type
    v = dt(momentum) * velocity - dt(lr) * gradient
    return param + v, v


def _batches(n, size):
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _augmented_batch(dataset: LabeledImages, idx, rng):
    crop = dataset.crop
    size = dataset.images.shape[-1]
    out = np.empty((len(idx), 3, crop, crop), dtype=np.float32)
    for j, i in enumerate(idx):
        y, x = rng.integers(0, size - crop + 1, size=2)
        view = dataset.images[i, :, y:y + crop, x:x + crop]
        out[j] = view[..., ::-1] if rng.random() < 0.5 else view
    return out


def loss_on(model: net.Model, x, y) -> float:
    logits, _ = net.forward(model, x)
    return ops.softmax_cross_entropy(logits, y)[0]


def train_step(model: net.Model, x, y, velocity: dict, config: SolverConfig, epoch: int) -> float:
    """One SGD step, updating ``model.params`` and ``velocity`` in place; returns the batch loss."""
    logits, caches = net.forward_with_cache(model, x)
    loss, probs = ops.softmax_cross_entropy(logits, y)
    if not np.isfinite(loss):
        return loss
    grads = net.backward(model, caches, ops.softmax_cross_entropy_backward(probs, y))
    for layer in model.architecture.weighted:
        lr = lr_at(config, epoch, layer.lr_mult)
        for part in ("weight", "bias"):
            key = f"{layer.name}.{part}"
            model.params[key], velocity[key] = sgd_update(
                model.params[key], grads[key], velocity[key], lr, config.momentum)
    return loss


def train(model: net.Model, train_set: LabeledImages, val_set: LabeledImages | None,
          config: SolverConfig):
    """Mini-batch training on center crops (or random crops/mirrors with ``augment``).

    Returns a new model and its :class:`TrainLog`; the input model is not
    touched.  The last partial batch of each epoch is used.
    """
    if len(train_set) == 0:
        raise SpecError("train set is empty")
    model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng(config.seed)
    trainlog = TrainLog()
    x_all = train_set.center_crops()
    y_all = train_set.labels
    iteration = 0
    for epoch in range(config.total_epochs):
        start = time.perf_counter()
        perm = rng.permutation(len(train_set))
        for lo, hi in _batches(len(perm), config.batch_size):
            idx = perm[lo:hi]
            xb = _augmented_batch(train_set, idx, rng) if config.augment else x_all[idx]
            loss = train_step(model, xb, y_all[idx], velocity, config, epoch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at iteration {iteration} (epoch {epoch})")
            trainlog.iterations.append((iteration, epoch, float(loss)))
            iteration += 1
        trainlog.train_accuracy.append(evaluate(model, train_set))
        if val_set is not None and len(val_set):
            trainlog.val_accuracy.append(evaluate(model, val_set))
        trainlog.epoch_seconds.append(time.perf_counter() - start)
        log.debug("epoch %d: loss %.4f train acc %.3f", epoch, trainlog.iterations[-1][2],
                  trainlog.train_accuracy[-1])
    return model, trainlog


def predict_proba(model: net.Model, dataset: LabeledImages, oversample: bool = False,
                  batch_size: int = 64) -> np.ndarray:
    """Class probabilities per sample; with ``oversample`` the mean over 10 views."""
    if oversample:
        views = oversample_views(dataset.images, dataset.crop)
        n = views.shape[0]
        flat = views.reshape((n * 10,) + views.shape[2:])
        probs = _probs(model, flat, batch_size)
        return probs.reshape(n, 10, -1).mean(axis=1)
    return _probs(model, dataset.center_crops(), batch_size)


def _probs(model, x, batch_size):
    out = []
    for lo, hi in _batches(len(x), batch_size):
        logits, _ = net.forward(model, x[lo:hi])
        out.append(ops.softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, model.architecture.class_count))


def predict(probs: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so exact ties go to class 0 (negative)
    return np.argmax(probs, axis=1)


def evaluate(model: net.Model, dataset: LabeledImages, oversample: bool = False) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(predict_proba(model, dataset, oversample)) == dataset.labels))
