"""Weight files, synthetic source tasks and the initialization comparison harness.

Weight file layout (all integers unsigned 32-bit little-endian)::

    b"P2SW" | version | entry count
    per entry: name length | UTF-8 name | rank | dims... | float32 LE payload
    descriptor length | UTF-8 JSON descriptor (architecture, provenance, meta)
    CRC-32 of every preceding byte
"""

from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sentinet import data, net, solver
from sentinet.data import LabeledImages, PreprocessConfig
from sentinet.errors import WeightFileError

log = logging.getLogger(__name__)

MAGIC = b"P2SW"
VERSION = 1


# --------------------------------------------------------------------------
# serialization


def encode_weights(model: net.Model) -> bytes:
    keys = list(net.param_shapes(model.architecture))
    parts = [MAGIC, struct.pack("<II", VERSION, len(keys))]
    for key in keys:
        arr = np.ascontiguousarray(model.params[key], dtype="<f4")
        name = key.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    descriptor = json.dumps({
        "architecture": model.architecture.to_dict(),
        "provenance": model.provenance,
        "meta": model.meta,
    }, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(descriptor)) + descriptor)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(model: net.Model, path) -> None:
    Path(path).write_bytes(encode_weights(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFileError(f"truncated weight file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_weights(buf: bytes, name: str = "<bytes>") -> net.Model:
    if buf[:4] != MAGIC:
        raise WeightFileError(f"{name}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 16:
        raise WeightFileError(f"{name}: file too short ({len(buf)} bytes)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4, "magic")
    version = r.u32("version")
    if version != VERSION:
        raise WeightFileError(f"{name}: unsupported version {version}")
    if zlib.crc32(body) != crc:
        raise WeightFileError(f"{name}: checksum mismatch (corrupted or truncated file)")
    params = {}
    for i in range(r.u32("entry count")):
        key = r.take(r.u32(f"entry {i} name length"), f"entry {i} name").decode("utf-8")
        if key in params:
            raise WeightFileError(f"{name}: duplicate entry '{key}'")
        rank = r.u32(f"rank of '{key}'")
        dims = [r.u32(f"dim {j} of '{key}'") for j in range(rank)]
        payload = r.take(4 * int(np.prod(dims)), f"payload of '{key}'")
        params[key] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    descriptor = json.loads(r.take(r.u32("descriptor length"), "descriptor").decode("utf-8"))
    if r.pos != len(body):
        raise WeightFileError(f"{name}: {len(body) - r.pos} trailing bytes after descriptor")
    arch = net.Architecture.from_dict(descriptor["architecture"])
    extra = sorted(set(params) - set(net.param_shapes(arch)))
    if extra:
        raise WeightFileError(f"{name}: entries {extra} are not in the architecture descriptor")
    try:
        return net.Model(arch, params, descriptor.get("provenance", "scratch"), descriptor.get("meta", {}))
    except ValueError as exc:
        raise WeightFileError(f"{name}: payload does not match descriptor: {exc}") from None


def load_weights(path) -> net.Model:
    path = Path(path)
    if not path.is_file():
        raise WeightFileError(f"weight file not found: {path}")
    return decode_weights(path.read_bytes(), str(path))


# --------------------------------------------------------------------------
# synthetic source tasks

GENERATORS = ("objects", "scenes", "sentiment")


@dataclass(frozen=True)
class SourceTaskSpec:
    """A pre-training task.

    ``objects`` separates shapes, ``scenes`` separates stripe textures and
    ``sentiment`` separates dominant hues; ``variant`` perturbs the
    generator the way language subsets perturb a shared ontology.
    """

    name: str
    generator: str
    class_count: int = 4  # objects has 4 distinct shapes; sentiment is best with 6 hues
    seed: int = 0
    variant: int = 0
    samples: int = 400

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator '{self.generator}', expected one of {GENERATORS}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")


def _hsv_color(hue: float, rng) -> np.ndarray:
    h = (hue % 1.0) * 6
    i, f = int(h), h - int(h)
    v, s = rng.uniform(190, 255), rng.uniform(0.6, 0.95)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6])


def _task_image(spec: SourceTaskSpec, cls: int, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = rng.uniform(60, 160, size=3)[None, None, :] + rng.normal(0, 20, size=(size, size, 3))
    if spec.generator == "sentiment":
        # hue classes start at red; with 6 classes pure green is one of them, matching the target cues
        hue = cls / spec.class_count + 0.02 * spec.variant + rng.normal(0, 0.02)
        r = rng.uniform(0.18, 0.32) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        img[mask] = _hsv_color(hue, rng) + rng.normal(0, 15, size=(int(mask.sum()), 3))
    elif spec.generator == "objects":
        r = rng.uniform(0.2, 0.3) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        dy, dx = np.abs(yy - cy), np.abs(xx - cx)
        shape = (cls + spec.variant) % 4
        mask = [dy ** 2 + dx ** 2 <= r ** 2, np.maximum(dy, dx) <= r * 0.8,
                dy + dx <= r, np.minimum(dy, dx) <= r * 0.25][shape] & (np.maximum(dy, dx) <= r)
        img[mask] = rng.uniform(0, 255, size=3)
    else:
        angle = np.pi * (cls / spec.class_count) + 0.1 * spec.variant
        period = rng.uniform(5, 9)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / period + phase)
        img += 50 * wave[..., None] * rng.uniform(0.5, 1.0, size=3)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def source_dataset(spec: SourceTaskSpec, config: PreprocessConfig) -> LabeledImages:
    """Resized, un-normalized images for a source task (classes balanced)."""
    rng = np.random.default_rng([spec.seed, zlib.crc32(spec.name.encode())])
    labels = np.arange(spec.samples) % spec.class_count
    raw = PreprocessConfig(config.resize_to, config.crop)
    size = config.resize_to
    images = np.stack([data.resize_and_normalize(_task_image(spec, int(c), size, rng), raw) for c in labels])
    return LabeledImages(images, labels.astype(np.int64), config.crop)


def pretrain_sources(specs, config: solver.SolverConfig, scale: str = "mini",
                     preprocess: PreprocessConfig = data.MINI_PREPROCESS, out_dir=None) -> dict:
    """Train one template network per source task; returns ``{name: Model}``."""
    models = {}
    for spec in specs:
        try:
            ds = source_dataset(spec, preprocess)
            means = ds.channel_means()
            arch = net.build_template(scale, spec.class_count)
            model = net.init_weights(arch, spec.seed)
            trained, _ = solver.train(model, ds.normalized(means),
                                      None, _with_seed(config, spec.seed))
        except Exception as exc:
            raise type(exc)(f"source task '{spec.name}': {exc}") from exc
        trained = trained.copy(provenance=f"source:{spec.name}", meta={"channel_means": list(means)})
        models[spec.name] = trained
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_weights(trained, Path(out_dir) / f"{spec.name}.p2sw")
    return models


def _with_seed(config, seed):
    return replace(config, seed=seed)


# --------------------------------------------------------------------------
# initialization comparison


def initial_model(source: net.Model | None, scale: str, seed: int, variant: str = "full") -> net.Model:
    """Target-task starting point: transferred from ``source`` or scratch (``None``)."""
    if source is None:
        arch = net.apply_variant(net.build_template(scale, 2), variant)
        return net.init_weights(arch, seed)
    target = net.apply_variant(source.architecture, variant)
    model, _ = net.transfer_weights(source, target, seed=seed)
    return model


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)  # (init, oversample, fold, accuracy)
    epochs_to_90: dict = field(default_factory=dict)  # init -> per-fold epoch or None
    logs: dict = field(default_factory=dict)  # init -> fold-0 TrainLog
    fold_digest: str = ""

    def summary(self) -> list:
        out = []
        for init in dict.fromkeys(r[0] for r in self.rows):
            for mode in (False, True):
                accs = [r[3] for r in self.rows if r[0] == init and r[1] == mode]
                mean, std = data.summarize(accs)
                out.append((init, mode, mean, std))
        return out

    def write(self, reports_dir, logs_dir) -> None:
        reports_dir, logs_dir = Path(reports_dir), Path(logs_dir)
        reports_dir.mkdir(parents=True, exist_ok=True)
        logs_dir.mkdir(parents=True, exist_ok=True)
        with (reports_dir / "compare_init_folds.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["init", "oversample", "fold", "accuracy"])
            for init, mode, fold, acc in self.rows:
                w.writerow([init, int(mode), fold, f"{acc:.6f}"])
        with (reports_dir / "compare_init_summary.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["init", "oversample", "mean", "std"])
            for init, mode, mean, std in self.summary():
                w.writerow([init, int(mode), f"{mean:.6f}", f"{std:.6f}"])
        for init, trainlog in self.logs.items():
            trainlog.write_csv(logs_dir / f"loss_{init}.csv")


def crossvalidate(make_model, dataset: LabeledImages, folds: data.FoldAssignment,
                  config: solver.SolverConfig):
    """Train on k-1 folds, test on the held-out one, with and without oversampling.

    ``make_model(fold)`` returns the starting model.  Channel means come
    from the training folds only.  Yields ``(fold, plain_acc, oversampled_acc, log)``.
    """
    for fold in range(folds.k):
        tr, te = folds.split(fold)
        train_set = dataset.subset(tr)
        means = train_set.channel_means()
        model = make_model(fold)
        trained, trainlog = solver.train(model, train_set.normalized(means), None, config)
        test_set = dataset.subset(te).normalized(means)
        yield (fold, solver.evaluate(trained, test_set), solver.evaluate(trained, test_set, True),
               trainlog)


def compare_initializations(inits: dict, target: LabeledImages, k: int,
                            config: solver.SolverConfig, scale: str = "mini",
                            fold_seed: int = 0) -> ComparisonReport:
    """Fine-tune from each initialization on identical folds and shuffling seeds.

    ``inits`` maps a display name to a source model, or to ``None`` for a
    from-scratch baseline.
    """
    if len(inits) < 2:
        raise ValueError("compare_initializations needs at least 2 initializations")
    folds = data.kfold(target.labels, k, fold_seed)
    report = ComparisonReport(fold_digest=folds.digest())
    for name in sorted(inits):
        source = inits[name]
        log.info("compare-init %s: folds %s", name, report.fold_digest)
        epochs = []
        for fold, plain, over, trainlog in crossvalidate(
                lambda f: initial_model(source, scale, config.seed), target, folds, config):
            report.rows.append((name, False, fold, plain))
            report.rows.append((name, True, fold, over))
            epochs.append(trainlog.first_epoch_reaching(0.9))
            if fold == 0:
                report.logs[name] = trainlog
        report.epochs_to_90[name] = epochs
    return report
