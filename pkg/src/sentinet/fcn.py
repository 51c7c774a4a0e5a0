"""Fully convolutional conversion, dense prediction maps and heatmaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sentinet import net, ops
from sentinet.errors import ConversionError, DimensionError
from sentinet.net import Architecture, LayerDef, Model
from sentinet.ops import ConvSpec


@dataclass(frozen=True)
class DensePredictionMap:
    grid: np.ndarray  # (h, w, classes) probabilities; channel 0 negative, 1 positive
    base: int
    stride: int

    @property
    def shape(self):
        return self.grid.shape[:2]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "p_negative", "p_positive"])
            for r in range(self.grid.shape[0]):
                for c in range(self.grid.shape[1]):
                    w.writerow([r, c, f"{self.grid[r, c, 0]:.6f}", f"{self.grid[r, c, 1]:.6f}"])


def convert_to_fcn(model: Model) -> Model:
    """Turn every dense layer into an equivalent stride-1 convolution.

    The first dense layer after the spatial feature map becomes a conv whose
    kernel covers that whole map; later dense layers become 1x1 convs.  The
    dense weight rows are reshaped with the same (channel, row, column)
    order used when flattening, so no retraining is needed.
    """
    arch = model.architecture
    if arch.fully_convolutional:
        return model
    inputs = net._input_shapes(arch)
    layers, params = [], {}
    for layer in arch.layers:
        if layer.kind != "dense":
            layers.append(layer)
            if layer.kind == "conv":
                for part in ("weight", "bias"):
                    params[f"{layer.name}.{part}"] = model.params[f"{layer.name}.{part}"]
            continue
        shape = inputs[layer.name]
        c, h, w = shape if len(shape) == 3 else (shape[0], 1, 1)
        weight = model.params[f"{layer.name}.weight"]
        if weight.shape[1] != c * h * w:
            raise ConversionError(
                f"layer '{layer.name}': input dimension {weight.shape[1]} is not "
                f"channels x height x width = {c}x{h}x{w} of the preceding map"
            )
        name = f"{layer.name}-conv"
        out = layer.spec.out_features
        layers.append(LayerDef(name, "conv", ConvSpec(out, h, w, stride=1, pad=0), layer.lr_mult))
        params[f"{name}.weight"] = weight.reshape(out, c, h, w)
        params[f"{name}.bias"] = model.params[f"{layer.name}.bias"]
    fcn_arch = Architecture(tuple(layers), arch.input_shape, arch.class_count, fully_convolutional=True)
    return Model(fcn_arch, params, model.provenance, dict(model.meta))


def input_size_for_map(base_input: int, total_stride: int, m: int) -> int:
    """Input side length that yields an m x m prediction map."""
    if m < 1:
        raise ValueError(f"map size must be >= 1, got {m}")
    return base_input + (m - 1) * total_stride


def _map_side(size: int, base: int, stride: int, axis: str) -> int:
    if size < base:
        raise DimensionError(f"input {axis} {size} is smaller than the base input size {base}")
    if (size - base) % stride:
        raise DimensionError(
            f"input {axis} {size} is not base {base} + k * stride {stride}; resize it to "
            f"{input_size_for_map(base, stride, (size - base) // stride + 1)} instead"
        )
    return (size - base) // stride + 1


def dense_predict(fcn_model: Model, image: np.ndarray) -> DensePredictionMap:
    """Single forward pass of a converted model over a (3, H, W) image."""
    arch = fcn_model.architecture
    if not arch.fully_convolutional:
        raise ConversionError("dense_predict needs a converted model (see convert_to_fcn)")
    base, stride = arch.input_shape[1], net.total_stride(arch)
    _map_side(image.shape[-2], base, stride, "height")
    _map_side(image.shape[-1], base, stride, "width")
    logits, _ = net.forward(fcn_model, image[None].astype(np.float32, copy=False))
    probs = ops.softmax(logits[0].astype(np.float64), axis=0)
    return DensePredictionMap(probs.transpose(1, 2, 0), base, stride)


def patchwise_oracle(regular_model: Model, image: np.ndarray, total_stride: int,
                     chunk: int = 8) -> DensePredictionMap:
    """Reference map: run the regular model on every base-size window.

    Windows start at multiples of ``total_stride``; patches are evaluated in
    batches of ``chunk`` and assembled in row-major order.
    """
    base = regular_model.architecture.input_shape[1]
    mh = _map_side(image.shape[-2], base, total_stride, "height")
    mw = _map_side(image.shape[-1], base, total_stride, "width")
    coords = [(r, c) for r in range(mh) for c in range(mw)]
    probs = []
    for lo in range(0, len(coords), chunk):
        batch = np.stack([
            image[:, r * total_stride:r * total_stride + base, c * total_stride:c * total_stride + base]
            for r, c in coords[lo:lo + chunk]
        ]).astype(np.float32, copy=False)
        logits, _ = net.forward(regular_model, batch)
        probs.append(ops.softmax(logits.astype(np.float64), axis=1))
    grid = np.concatenate(probs).reshape(mh, mw, -1)
    return DensePredictionMap(grid, base, total_stride)


def _to_byte(p: np.ndarray) -> np.ndarray:
    # round half up
    return np.floor(255.0 * np.asarray(p, dtype=np.float64) + 0.5).clip(0, 255).astype(np.uint8)


def render_heatmap(pred: DensePredictionMap, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbor upsampled RGB heatmap: red = p_negative, green = p_positive."""
    if target_h < 1 or target_w < 1:
        raise DimensionError(f"heatmap target size must be positive, got {target_h}x{target_w}")
    h, w = pred.shape
    if target_h < h or target_w < w:
        raise DimensionError(f"heatmap target {target_h}x{target_w} smaller than map {h}x{w}")
    rows = np.arange(target_h) * h // target_h
    cols = np.arange(target_w) * w // target_w
    cells = pred.grid[rows][:, cols]
    out = np.zeros((target_h, target_w, 3), dtype=np.uint8)
    out[..., 0] = _to_byte(cells[..., 0])
    out[..., 1] = _to_byte(cells[..., 1])
    return out


def heatmap_probabilities(heatmap: np.ndarray) -> np.ndarray:
    """Decode (p_negative, p_positive) per pixel from a rendered heatmap."""
    return heatmap[..., :2].astype(np.float64) / 255.0


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    blended = (1 - alpha) * image.astype(np.float64) + alpha * heatmap.astype(np.float64)
    return np.floor(blended + 0.5).clip(0, 255).astype(np.uint8)
