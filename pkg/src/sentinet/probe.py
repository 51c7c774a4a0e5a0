"""Layer-wise linear probing with cross-validated L2 regularization.

Both classifier kinds minimize ``mean loss + reg/2 * ||W||^2`` (bias not
penalized) by full-batch (sub)gradient descent.  Every step is accepted
only if it lowers the objective, halving the step otherwise, so the
objective trace is non-increasing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sentinet import net, ops
from sentinet.data import LabeledImages, kfold, summarize
from sentinet.errors import FitError

DEFAULT_GRID = tuple(float(v) for v in np.logspace(-3, 3, 7))
KINDS = ("svm", "softmax")


@dataclass
class LinearClassifier:
    kind: str
    weights: np.ndarray  # (1, d) for svm, (2, d) for softmax
    bias: np.ndarray
    reg_strength: float
    mean: np.ndarray | None = None  # standardization, fitted on training rows only
    scale: np.ndarray | None = None
    objective_trace: list = field(default_factory=list, repr=False)

    def _prep(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x

    def decision(self, x) -> np.ndarray:
        return self._prep(x) @ self.weights.T + self.bias

    def predict(self, x) -> np.ndarray:
        s = self.decision(x)
        if self.kind == "svm":
            return (s[:, 0] > 0).astype(np.int64)  # score 0 goes to negative
        return np.argmax(s, axis=1)

    def accuracy(self, x, labels) -> float:
        return float(np.mean(self.predict(x) == np.asarray(labels)))


def _loss_on_scores(kind, scores, y):
    """Data term and its gradient with respect to the (n, rows) scores."""
    if kind == "svm":
        loss, ds, _ = ops.hinge_loss(scores[:, 0], 2 * y - 1)
        return loss, ds[:, None]
    loss, probs = ops.softmax_cross_entropy(scores, y)
    return loss, ops.softmax_cross_entropy_backward(probs, y)


class _Primal:
    """Weights held explicitly: w is (rows, d)."""

    def __init__(self, x):
        self.x = x

    def scores(self, w):
        return self.x @ w.T

    def penalty(self, w):
        return float(np.sum(w * w))

    def grad(self, dscores, w, reg):
        return dscores.T @ self.x + reg * w

    def sqnorm(self, g):
        return float(np.sum(g * g))

    def weights(self, w):
        return w


class _Span:
    """Weights kept in the span of the training rows, w = a.T @ x, driven by the Gram matrix.

    Gradient steps on ``a`` reproduce gradient steps on ``w`` exactly, at
    O(n^2) per step instead of O(n d).
    """

    def __init__(self, x, gram):
        self.x, self.gram = x, gram

    def scores(self, a):
        return self.gram @ a

    def penalty(self, a):
        return float(np.sum(a * (self.gram @ a)))

    def grad(self, dscores, a, reg):
        return dscores + reg * a

    def sqnorm(self, g):
        return float(np.sum(g * (self.gram @ g)))

    def weights(self, a):
        return a.T @ self.x


def _descend(kind, space, y, p, rows, reg, step, iterations):
    b = np.zeros(rows)

    def evaluate(p, b):
        loss, ds = _loss_on_scores(kind, space.scores(p) + b, y)
        f = loss + 0.5 * reg * space.penalty(p)
        return f, space.grad(ds, p, reg), ds.sum(axis=0)

    f, gp, gb = evaluate(p, b)
    trace = [f]
    for _ in range(iterations):
        gnorm = space.sqnorm(gp) + float(np.sum(gb * gb))
        if gnorm == 0:
            break
        for _ in range(60):
            p_new, b_new = p - step * gp, b - step * gb
            f_new, gp_new, gb_new = evaluate(p_new, b_new)
            if f_new < f - 1e-4 * step * gnorm or (kind == "svm" and f_new < f):
                break
            step *= 0.5
        else:
            break
        p, b, f, gp, gb = p_new, b_new, f_new, gp_new, gb_new
        trace.append(f)
        step *= 2.0
    return p, b, trace


def fit_linear(features, labels, kind: str, reg_strength: float, seed: int = 0,
               iterations: int = 300, standardize: bool = False, gram=None) -> LinearClassifier:
    """Fit an L2-regularized linear SVM (single score) or two-logit softmax.

    With more feature dimensions than samples the descent runs in the span
    of the samples; ``gram`` may pass a precomputed ``x @ x.T`` for that case.
    """
    if kind not in KINDS:
        raise FitError(f"unknown classifier kind '{kind}'")
    if reg_strength <= 0:
        raise FitError(f"reg_strength must be > 0, got {reg_strength}")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise FitError(f"need at least 2 classes to fit, got labels {np.unique(y).tolist()}")
    if not np.all(np.isfinite(x)):
        raise FitError("features contain non-finite values")
    mean = scale = None
    if standardize:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        x = (x - mean) / scale
        gram = None
    n, d = x.shape
    rows = 1 if kind == "svm" else 2
    rng = np.random.default_rng(seed)
    sq = float(np.mean(np.sum(x * x, axis=1)))
    init = 1e-3 / np.sqrt(max(sq, 1.0))
    if d > n:
        space = _Span(x, x @ x.T if gram is None else gram)
        p = rng.standard_normal((n, rows)) * init / n
    else:
        space = _Primal(x)
        p = rng.standard_normal((rows, d)) * init
    p, b, trace = _descend(kind, space, y, p, rows, reg_strength,
                           1.0 / (reg_strength + max(sq, 1e-12)), iterations)
    return LinearClassifier(kind, space.weights(p), b, reg_strength, mean, scale, trace)


def _shared_gram(features, fit_kw):
    """Gram matrix to slice per fold when the span parameterization applies."""
    x = np.asarray(features, dtype=np.float64)
    if fit_kw.get("standardize") or x.shape[1] <= x.shape[0]:
        return None
    return x @ x.T


def _fit_rows(features, labels, rows, kind, reg, seed, gram, fit_kw):
    sub = None if gram is None else gram[np.ix_(rows, rows)]
    return fit_linear(features[rows], labels[rows], kind, reg, seed, gram=sub, **fit_kw)


def regularization_scores(features, labels, kind, grid, inner_folds=3, seed=0, gram=None, **fit_kw):
    """Mean inner-fold accuracy for every grid value."""
    labels = np.asarray(labels)
    folds = kfold(labels, inner_folds, seed)
    if gram is None:
        gram = _shared_gram(features, fit_kw)
    scores = {}
    for reg in grid:
        accs = []
        for f in range(inner_folds):
            tr, te = folds.split(f)
            clf = _fit_rows(features, labels, tr, kind, reg, seed, gram, fit_kw)
            accs.append(clf.accuracy(features[te], labels[te]))
        scores[float(reg)] = float(np.mean(accs))
    return scores


def select_regularization(features, labels, kind, grid=DEFAULT_GRID, inner_folds=3, seed=0,
                          gram=None, **fit_kw) -> float:
    """Grid value with the best inner-fold accuracy; ties go to the strongest regularization."""
    if len(grid) == 0:
        raise FitError("regularization grid is empty")
    scores = regularization_scores(features, labels, kind, grid, inner_folds, seed, gram, **fit_kw)
    best = None
    for reg in sorted(scores, reverse=True):
        if best is None or scores[reg] > scores[best]:
            best = reg
    return best


def extract_features(model: net.Model, dataset: LabeledImages, layer: str,
                     batch_size: int = 32) -> np.ndarray:
    """Post-activation output of ``layer`` on center crops, flattened per sample."""
    if layer not in model.architecture.capturable:
        raise KeyError(f"unknown layer '{layer}'")
    x = dataset.center_crops()
    rows = []
    for lo in range(0, len(x), batch_size):
        _, cap = net.forward(model, x[lo:lo + batch_size], [layer])
        rows.append(cap[layer].reshape(cap[layer].shape[0], -1))
    return np.concatenate(rows)


@dataclass(frozen=True)
class ProbeResult:
    layer: str
    classifier: str
    fold_accuracies: tuple
    mean: float
    std: float


def probe_features(features, labels, kind, outer_folds=5, seed=0, grid=DEFAULT_GRID,
                   inner_folds=3, **fit_kw) -> list[float]:
    """Outer-fold accuracies; regularization is chosen on the training folds only."""
    labels = np.asarray(labels)
    folds = kfold(labels, outer_folds, seed)
    gram = _shared_gram(features, fit_kw)
    accs = []
    for f in range(outer_folds):
        tr, te = folds.split(f)
        inner = None if gram is None else gram[np.ix_(tr, tr)]
        reg = select_regularization(features[tr], labels[tr], kind, grid, inner_folds, seed,
                                    inner, **fit_kw)
        clf = _fit_rows(features, labels, tr, kind, reg, seed, gram, fit_kw)
        accs.append(clf.accuracy(features[te], labels[te]))
    return accs


def probe_all_layers(model: net.Model, dataset: LabeledImages, outer_folds: int = 5, seed: int = 0,
                     grid=DEFAULT_GRID, inner_folds: int = 3, layers=None, kinds=KINDS,
                     **fit_kw) -> list[ProbeResult]:
    """One result per (layer, classifier), deepest layer first."""
    layers = list(layers) if layers is not None else list(reversed(model.architecture.capturable))
    results = []
    for layer in layers:
        feats = extract_features(model, dataset, layer)
        for kind in kinds:
            accs = probe_features(feats, dataset.labels, kind, outer_folds, seed, grid,
                                  inner_folds, **fit_kw)
            mean, std = summarize(accs)
            results.append(ProbeResult(layer, kind, tuple(accs), mean, std))
    return results


def write_probe_reports(results, folds_path, summary_path) -> None:
    with Path(folds_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "classifier", "fold", "accuracy"])
        for r in results:
            for i, acc in enumerate(r.fold_accuracies):
                w.writerow([r.layer, r.classifier, i, f"{acc:.6f}"])
    with Path(summary_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "classifier", "mean", "std"])
        for r in results:
            w.writerow([r.layer, r.classifier, f"{r.mean:.6f}", f"{r.std:.6f}"])
