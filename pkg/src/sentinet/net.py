"""Architectures, the CaffeNet-style template, surgery, initialization and transfer.

An :class:`Architecture` is an immutable ordered list of :class:`LayerDef`.
A :class:`Model` binds parameter arrays to the weighted layers, keyed as
``"<layer>.weight"`` and ``"<layer>.bias"``.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from sentinet import ops
from sentinet.errors import DimensionError, SpecError, SurgeryError, TransferError
from sentinet.ops import ConvSpec, LrnSpec, PoolSpec

log = logging.getLogger(__name__)

KINDS = ("conv", "maxpool", "lrn", "relu", "dense", "softmax")
WEIGHTED = ("conv", "dense")
VARIANTS = ("full", "fc7-2", "fc6-2", "fc9-extended")

NEW_LAYER_STD = 0.01


@dataclass(frozen=True)
class DenseSpec:
    out_features: int

    def __post_init__(self):
        if self.out_features < 1:
            raise SpecError("dense layer needs at least one output")


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str
    spec: ConvSpec | PoolSpec | LrnSpec | DenseSpec | None = None
    lr_mult: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind '{self.kind}' for layer '{self.name}'")
        if self.lr_mult < 0:
            raise SpecError(f"layer '{self.name}' has negative lr_mult {self.lr_mult}")


@dataclass(frozen=True)
class Architecture:
    layers: tuple[LayerDef, ...]
    input_shape: tuple[int, int, int]
    class_count: int
    fully_convolutional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        names = [layer.name for layer in self.layers]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SpecError(f"duplicate layer names: {dupes}")
        shapes = infer_shapes(self)
        last = [l for l in self.layers if l.kind in WEIGHTED][-1]
        if shapes[last.name][0] != self.class_count:
            raise SpecError(
                f"final weighted layer '{last.name}' has {shapes[last.name][0]} outputs, "
                f"expected class_count={self.class_count}"
            )

    def layer(self, name: str) -> LayerDef:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"unknown layer '{name}'")

    def index(self, name: str) -> int:
        return [l.name for l in self.layers].index(name)

    @property
    def weighted(self) -> list[LayerDef]:
        return [l for l in self.layers if l.kind in WEIGHTED]

    @property
    def capturable(self) -> list[str]:
        """Layers whose (post-activation) output can be captured, in order."""
        return [l.name for l in self.layers if l.kind not in ("relu", "softmax")]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "fully_convolutional": self.fully_convolutional,
            "layers": [
                {"name": l.name, "kind": l.kind, "lr_mult": l.lr_mult,
                 "spec": None if l.spec is None else vars(l.spec)}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        spec_types = {"conv": ConvSpec, "maxpool": PoolSpec, "lrn": LrnSpec, "dense": DenseSpec}
        layers = []
        for l in d["layers"]:
            spec = spec_types[l["kind"]](**l["spec"]) if l["spec"] is not None else None
            layers.append(LayerDef(l["name"], l["kind"], spec, float(l["lr_mult"])))
        return cls(tuple(layers), tuple(d["input_shape"]), int(d["class_count"]),
                   bool(d.get("fully_convolutional", False)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class Model:
    architecture: Architecture
    params: dict[str, np.ndarray]
    provenance: str = "scratch"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.architecture)
        missing = sorted(set(expected) - set(self.params))
        if missing:
            raise SpecError(f"unbound parameters: {missing}")
        for key, shape in expected.items():
            if self.params[key].shape != shape:
                raise DimensionError(f"parameter {key} has shape {self.params[key].shape}, expected {shape}")

    def copy(self, **changes) -> "Model":
        params = {k: v.copy() for k, v in self.params.items()}
        return replace(self, params=changes.pop("params", params), **changes)


# --------------------------------------------------------------------------
# shapes and parameter accounting


def _layer_output(layer: LayerDef, shape: tuple) -> tuple:
    spec = layer.spec
    if layer.kind == "conv":
        c, h, w = shape if len(shape) == 3 else (None, None, None)
        if c is None:
            raise DimensionError(f"layer '{layer.name}': conv needs a spatial input, got {shape}")
        if c % spec.groups:
            raise SpecError(f"layer '{layer.name}': {c} input channels not divisible by groups={spec.groups}")
        ho = ops.conv_output_size(h, spec.kernel_h, spec.stride, spec.pad)
        wo = ops.conv_output_size(w, spec.kernel_w, spec.stride, spec.pad)
        if ho < 1 or wo < 1:
            raise DimensionError(f"layer '{layer.name}': input {shape} too small for kernel")
        return (spec.out_channels, ho, wo)
    if layer.kind == "maxpool":
        if len(shape) != 3:
            raise DimensionError(f"layer '{layer.name}': pooling needs a spatial input, got {shape}")
        c, h, w = shape
        if h < spec.kernel or w < spec.kernel:
            raise DimensionError(f"layer '{layer.name}': input {shape} smaller than pool kernel {spec.kernel}")
        return (c, ops.pool_output_size(h, spec.kernel, spec.stride),
                ops.pool_output_size(w, spec.kernel, spec.stride))
    if layer.kind == "dense":
        return (spec.out_features,)
    return shape


def infer_shapes(arch: Architecture, input_shape: Iterable[int] | None = None) -> dict[str, tuple]:
    """Per-layer output shapes (without the batch axis), in layer order."""
    shape = tuple(input_shape) if input_shape is not None else arch.input_shape
    if shape[0] != arch.input_shape[0]:
        raise DimensionError(f"input has {shape[0]} channels, architecture expects {arch.input_shape[0]}")
    out = {}
    for layer in arch.layers:
        shape = _layer_output(layer, shape)
        out[layer.name] = shape
    return out


def _input_shapes(arch: Architecture) -> dict[str, tuple]:
    shapes = {}
    shape = arch.input_shape
    for layer in arch.layers:
        shapes[layer.name] = shape
        shape = _layer_output(layer, shape)
    return shapes


def param_shapes(arch: Architecture) -> dict[str, tuple]:
    inputs = _input_shapes(arch)
    shapes = {}
    for layer in arch.weighted:
        spec = layer.spec
        if layer.kind == "conv":
            c = inputs[layer.name][0]
            shapes[f"{layer.name}.weight"] = (spec.out_channels, c // spec.groups, spec.kernel_h, spec.kernel_w)
            shapes[f"{layer.name}.bias"] = (spec.out_channels,)
        else:
            d = int(np.prod(inputs[layer.name]))
            shapes[f"{layer.name}.weight"] = (spec.out_features, d)
            shapes[f"{layer.name}.bias"] = (spec.out_features,)
    return shapes


def param_count(arch: Architecture) -> tuple[int, dict[str, int]]:
    """Total parameter count and a per-layer breakdown (0 for unweighted layers)."""
    shapes = param_shapes(arch)
    per_layer = {}
    for layer in arch.layers:
        per_layer[layer.name] = sum(
            int(np.prod(shapes[f"{layer.name}.{p}"])) for p in ("weight", "bias")
        ) if layer.kind in WEIGHTED else 0
    return sum(per_layer.values()), per_layer


def total_stride(arch: Architecture) -> int:
    stride = 1
    for layer in arch.layers:
        if layer.kind in ("conv", "maxpool"):
            stride *= layer.spec.stride
    return stride


# --------------------------------------------------------------------------
# templates and surgery

_FULL = {
    "input": 227,
    "conv": [  # (out, kernel, stride, pad, groups)
        (96, 11, 4, 0, 1),
        (256, 5, 1, 2, 2),
        (384, 3, 1, 1, 1),
        (384, 3, 1, 1, 2),
        (256, 3, 1, 1, 2),
    ],
    "fc": (4096, 4096),
}

# Same layer ordering at desk scale.  Total stride 16 on a 63x63 input; the
# convolutions are unpadded so a larger input tiles exactly into 63x63 patches.
_MINI = {
    "input": 63,
    "conv": [
        (8, 5, 2, 0, 1),
        (16, 3, 1, 0, 2),
        (24, 3, 1, 0, 1),
        (24, 1, 1, 0, 2),
        (16, 1, 1, 0, 2),
    ],
    "fc": (64, 64),
}


def build_template(scale: str = "full", class_count: int = 2, head_name: str = "fc8") -> Architecture:
    """CaffeNet-style network: 5 conv + 3 fully-connected layers.

    conv1 and conv2 are each followed by ReLU, max pooling and then LRN;
    conv5 by ReLU and max pooling.  ``scale="mini"`` keeps that ordering
    with narrow layers and a 63x63 input.
    """
    if class_count < 2:
        raise SpecError(f"class_count must be >= 2, got {class_count}")
    try:
        cfg = {"full": _FULL, "mini": _MINI}[scale]
    except KeyError:
        raise SpecError(f"unknown template scale '{scale}'") from None
    pool = PoolSpec(3, 2)
    layers = []
    for i, (out, k, s, p, g) in enumerate(cfg["conv"], start=1):
        layers.append(LayerDef(f"conv{i}", "conv", ConvSpec(out, k, k, stride=s, pad=p, groups=g)))
        layers.append(LayerDef(f"relu{i}", "relu"))
        if i in (1, 2):
            layers.append(LayerDef(f"pool{i}", "maxpool", pool))
            layers.append(LayerDef(f"norm{i}", "lrn", LrnSpec()))
        elif i == 5:
            layers.append(LayerDef("pool5", "maxpool", pool))
    fc6, fc7 = cfg["fc"]
    layers += [
        LayerDef("fc6", "dense", DenseSpec(fc6)),
        LayerDef("relu6", "relu"),
        LayerDef("fc7", "dense", DenseSpec(fc7)),
        LayerDef("relu7", "relu"),
        LayerDef(head_name, "dense", DenseSpec(class_count)),
        LayerDef("prob", "softmax"),
    ]
    size = cfg["input"]
    return Architecture(tuple(layers), (3, size, size), class_count)


def apply_variant(arch: Architecture, variant: str, target_classes: int = 2) -> Architecture:
    """Ablate or extend the fully-connected stack of a template network.

    * ``full``: head replaced by a fresh ``fc8_twitter`` layer.
    * ``fc7-2``: fc7 removed; a fresh ``fc7_twitter`` head sits on fc6.
    * ``fc6-2``: fc6 and fc7 removed; a fresh ``fc6_twitter`` head sits on pool5.
    * ``fc9-extended``: the existing head is kept at its width and a fresh
      ``fc9_twitter`` layer is appended on top of it.
    """
    if variant not in VARIANTS:
        raise SurgeryError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    names = [l.name for l in arch.layers]
    for needed in ("pool5", "fc6", "fc7"):
        if needed not in names:
            raise SurgeryError(f"variant '{variant}' needs layer '{needed}', not found in architecture")
    dense_layers = [l for l in arch.layers if l.kind == "dense"]
    if len(dense_layers) != 3 or names[-1] != "prob":
        raise SurgeryError(f"variant '{variant}' applies only to a template with fc6/fc7/head + softmax")
    head = dense_layers[-1]
    keep_until = {"full": "relu7", "fc7-2": "relu6", "fc6-2": "pool5"}
    prob = arch.layers[-1]
    if variant == "fc9-extended":
        layers = list(arch.layers[:-1]) + [
            LayerDef("fc9_twitter", "dense", DenseSpec(target_classes)), prob]
    else:
        new_name = {"full": "fc8_twitter", "fc7-2": "fc7_twitter", "fc6-2": "fc6_twitter"}[variant]
        cut = names.index(keep_until[variant]) + 1
        layers = list(arch.layers[:cut]) + [
            LayerDef(new_name, "dense", DenseSpec(target_classes)), prob]
    return Architecture(tuple(layers), arch.input_shape, target_classes)


def with_lr_mult(arch: Architecture, names: Iterable[str], mult: float) -> Architecture:
    names = set(names)
    layers = tuple(replace(l, lr_mult=mult) if l.name in names else l for l in arch.layers)
    return replace(arch, layers=layers)


# --------------------------------------------------------------------------
# initialization and transfer


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _init_layer(arch: Architecture, layer: LayerDef, seed: int, std: float | None):
    shapes = param_shapes(arch)
    wshape = shapes[f"{layer.name}.weight"]
    if std is None:
        fan_in = int(np.prod(wshape[1:]))
        std = float(np.sqrt(2.0 / fan_in))
    rng = _layer_rng(seed, layer.name)
    weight = rng.standard_normal(wshape, dtype=np.float32) * np.float32(std)
    bias = np.zeros(shapes[f"{layer.name}.bias"], dtype=np.float32)
    return weight, bias


def init_weights(arch: Architecture, seed: int, policy: str = "scratch") -> Model:
    """Fresh parameters for every weighted layer, deterministic in ``seed``.

    ``scratch`` draws N(0, 2/fan_in) weights; ``gaussian`` draws N(0, 0.01^2),
    the scheme used for newly added layers.  Biases are always zero.
    """
    if policy not in ("scratch", "gaussian"):
        raise SpecError(f"unknown init policy '{policy}'")
    std = None if policy == "scratch" else NEW_LAYER_STD
    params = {}
    for layer in arch.weighted:
        w, b = _init_layer(arch, layer, seed, std)
        params[f"{layer.name}.weight"] = w
        params[f"{layer.name}.bias"] = b
    return Model(arch, params, "scratch")


def transfer_weights(source: Model, target_arch: Architecture, seed: int = 0,
                     fresh_lr_mult: float = 10.0, source_name: str | None = None):
    """Copy parameters into ``target_arch`` by layer name.

    Layers present in both with identical parameter shapes are copied.
    Unmatched weighted layers get N(0, 0.01^2) weights, zero bias and
    ``fresh_lr_mult``.  A name match with a different shape is an error.
    Returns ``(model, fresh_layer_names)``.
    """
    src_shapes = param_shapes(source.architecture)
    tgt_shapes = param_shapes(target_arch)
    fresh = []
    params = {}
    for layer in target_arch.weighted:
        wkey, bkey = f"{layer.name}.weight", f"{layer.name}.bias"
        if wkey in src_shapes:
            if src_shapes[wkey] != tgt_shapes[wkey] or src_shapes[bkey] != tgt_shapes[bkey]:
                raise TransferError(
                    f"layer '{layer.name}': source shape {src_shapes[wkey]} != target shape {tgt_shapes[wkey]}"
                )
            params[wkey] = source.params[wkey].copy()
            params[bkey] = source.params[bkey].copy()
        else:
            w, b = _init_layer(target_arch, layer, seed, NEW_LAYER_STD)
            params[wkey], params[bkey] = w, b
            fresh.append(layer.name)
    if fresh:
        log.info("transfer: freshly initialized layers %s", fresh)
        target_arch = with_lr_mult(target_arch, fresh, fresh_lr_mult)
    tag = f"transferred-from:{source_name or source.provenance}"
    return Model(target_arch, params, tag, dict(source.meta)), fresh


# --------------------------------------------------------------------------
# forward / backward


def _run_layer(model: Model, layer: LayerDef, x: np.ndarray):
    """Returns (output, cache)."""
    p = model.params
    if layer.kind == "conv":
        return ops.conv2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], layer.spec), x
    if layer.kind == "dense":
        return ops.dense(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"]), x
    if layer.kind == "relu":
        return ops.relu(x), x
    if layer.kind == "maxpool":
        out, arg = ops.maxpool(x, layer.spec)
        return out, (x.shape, arg)
    if layer.kind == "lrn":
        return ops.lrn(x, layer.spec), x
    return x, None  # softmax marker: logits pass through


def _check_batch(model: Model, batch: np.ndarray):
    arch = model.architecture
    if batch.ndim != 4:
        raise DimensionError(f"batch must be (N,C,H,W), got shape {batch.shape}")
    if arch.fully_convolutional:
        if batch.shape[1] != arch.input_shape[0]:
            raise DimensionError(f"batch has {batch.shape[1]} channels, expected {arch.input_shape[0]}")
        if batch.shape[2] < arch.input_shape[1] or batch.shape[3] < arch.input_shape[2]:
            raise DimensionError(f"input {batch.shape[2:]} smaller than base size {arch.input_shape[1:]}")
    elif tuple(batch.shape[1:]) != arch.input_shape:
        raise DimensionError(f"batch shape {batch.shape[1:]} != declared input {arch.input_shape}")


def forward(model: Model, batch: np.ndarray, capture: Iterable[str] = (), checked: bool = False):
    """Run the network; returns ``(logits, captured)``.

    ``captured`` maps each requested layer name to its output after the
    ReLU that directly follows it, if any.
    """
    arch = model.architecture
    capture = list(capture)
    known = set(arch.capturable)
    for name in capture:
        if name not in known:
            raise KeyError(f"unknown capture layer '{name}'")
    _check_batch(model, batch)
    wanted = set(capture)
    captured = {}
    x = batch
    layers = arch.layers
    for i, layer in enumerate(layers):
        x, _ = _run_layer(model, layer, x)
        if checked:
            ops.check_finite(f"output of layer '{layer.name}'", x)
        if layer.name in wanted:
            follows_relu = i + 1 < len(layers) and layers[i + 1].kind == "relu"
            captured[layer.name] = ops.relu(x) if follows_relu else x
    return x, {name: captured[name] for name in capture}


def forward_with_cache(model: Model, batch: np.ndarray):
    _check_batch(model, batch)
    caches = []
    x = batch
    for layer in model.architecture.layers:
        x, cache = _run_layer(model, layer, x)
        caches.append(cache)
    return x, caches


def backward(model: Model, caches: list, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(logits)."""
    grads = {}
    p = model.params
    d = dlogits
    for layer, cache in zip(reversed(model.architecture.layers), reversed(caches)):
        if layer.kind == "conv":
            d, dw, db = ops.conv2d_backward(d, cache, p[f"{layer.name}.weight"], layer.spec)
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        elif layer.kind == "dense":
            d, dw, db = ops.dense_backward(d, cache, p[f"{layer.name}.weight"])
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        elif layer.kind == "relu":
            d = ops.relu_backward(d, cache)
        elif layer.kind == "maxpool":
            shape, arg = cache
            d = ops.maxpool_backward(d, arg, shape, layer.spec)
        elif layer.kind == "lrn":
            d = ops.lrn_backward(d, cache, layer.spec)
    return grads
