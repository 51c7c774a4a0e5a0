"""Command-line entry point.

Settings come from built-in defaults, then the JSON file given with
``--config``, then explicit flags (highest precedence).  Outputs go under
``--out`` in ``logs/``, ``weights/``, ``reports/`` and ``heatmaps/``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from sentinet import data, fcn, net, ppm, probe, solver, zoo
from sentinet.errors import (ConversionError, DataError, NumericError, SpecError, SurgeryError,
                             TransferError)

log = logging.getLogger("sentinet")

DEFAULTS = {
    "scale": "mini",
    "variant": "full",
    "base_lr": 0.0005,
    "momentum": 0.9,
    "gamma": 0.1,
    "step_epochs": 10,
    "total_epochs": 30,
    "batch_size": 32,
    "seed": 0,
    "fold_seed": 0,
    "augment": False,
    "manifest": None,
    "agreement": 5,
    "k": 5,
    "oversample": True,
    "out": "run",
    "weights": None,
    "n": 880,
    "size": 63,
    "map_size": 4,
}

SOLVER_KEYS = ("base_lr", "momentum", "gamma", "step_epochs", "total_epochs", "batch_size", "seed", "augment")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=88, max_help_position=32)


def load_run_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise DataError(f"config file {path}: top level must be an object")
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"config file {path}: unknown keys {unknown}")
    return cfg


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        settings.update(load_run_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def solver_config(settings: dict) -> solver.SolverConfig:
    return solver.SolverConfig(**{k: settings[k] for k in SOLVER_KEYS})


def preprocess_for(scale: str) -> data.PreprocessConfig:
    return data.FULL_PREPROCESS if scale == "full" else data.MINI_PREPROCESS


def _layout(out) -> dict:
    root = Path(out)
    dirs = {name: root / name for name in ("logs", "weights", "reports", "heatmaps")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _require(settings, key, flag):
    if settings.get(key) is None:
        raise UsageError(f"missing required setting '{key}' (flag {flag})")
    return settings[key]


def _dataset(settings):
    manifest = Path(_require(settings, "manifest", "--manifest"))
    records = data.filter_agreement(data.load_manifest(manifest), settings["agreement"])
    if not records:
        raise DataError(f"{manifest}: no records at agreement level {settings['agreement']}")
    return data.load_dataset(manifest, records, preprocess_for(settings["scale"]))


def _source(settings, flag="--from"):
    return zoo.load_weights(_require(settings, "weights", flag))


def _fc6_2_preset(settings, args, variant):
    if variant == "fc6-2" and getattr(args, "base_lr", None) is None:
        base_lr = solver.FC6_2_PRESET.base_lr
        log.warning("fc6-2 preset: base_lr %g", base_lr)
        return {**settings, "base_lr": base_lr}
    return settings


def _write_rows(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return f"{v:.6f}"


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, settings):
    out = Path(settings["out"])
    records = data.synth_dataset(settings["n"], settings["size"], settings["seed"], out)
    print(f"wrote {len(records)} images and {out / 'manifest.csv'}")


def _train_and_save(model, ds, settings, dirs, stem):
    means = ds.channel_means()
    trained, trainlog = solver.train(model, ds.normalized(means), None, solver_config(settings))
    trained = trained.copy(meta={**trained.meta, "channel_means": list(means)})
    zoo.save_weights(trained, dirs["weights"] / f"{stem}.p2sw")
    trainlog.write_csv(dirs["logs"] / f"{stem}_loss.csv")
    print(f"{stem}: final train accuracy {trainlog.train_accuracy[-1]:.3f}" if trainlog.train_accuracy
          else f"{stem}: no epochs run")
    return trained


def cmd_train(args, settings):
    dirs = _layout(settings["out"])
    ds = _dataset(settings)
    arch = net.apply_variant(net.build_template(settings["scale"], 2), settings["variant"])
    _train_and_save(net.init_weights(arch, settings["seed"]), ds, settings, dirs, "scratch")


def cmd_finetune(args, settings):
    dirs = _layout(settings["out"])
    variant = settings["variant"]
    settings = _fc6_2_preset(settings, args, variant)
    source = _source(settings)
    ds = _dataset(settings)
    model = zoo.initial_model(source, settings["scale"], settings["seed"], variant)
    log.info("fine-tuning %s with base_lr %g", variant, settings["base_lr"])
    _train_and_save(model, ds, settings, dirs, f"finetune_{variant}")


def _xval(settings, source, variant):
    ds = _dataset(settings)
    folds = data.kfold(ds.labels, settings["k"], settings["fold_seed"])
    config = solver_config(settings)
    rows = []
    for fold, plain, over, _ in zoo.crossvalidate(
            lambda f: zoo.initial_model(source, settings["scale"], settings["seed"], variant),
            ds, folds, config):
        rows.append((fold, plain, over))
    return rows


def _summary_rows(rows):
    plain = data.summarize([r[1] for r in rows])
    over = data.summarize([r[2] for r in rows])
    return plain, over


def cmd_xval(args, settings):
    dirs = _layout(settings["out"])
    source = zoo.load_weights(settings["weights"]) if settings["weights"] else None
    variant = settings["variant"]
    if source is not None:
        settings = _fc6_2_preset(settings, args, variant)
    rows = _xval(settings, source, variant)
    _write_rows(dirs["reports"] / "xval_folds.csv", ["oversample", "fold", "accuracy"],
                [(0, f, _fmt(p)) for f, p, _ in rows] + [(1, f, _fmt(o)) for f, _, o in rows])
    plain, over = _summary_rows(rows)
    _write_rows(dirs["reports"] / "xval_summary.csv", ["oversample", "mean", "std"],
                [(0, _fmt(plain[0]), _fmt(plain[1])), (1, _fmt(over[0]), _fmt(over[1]))])
    print(f"without oversampling: {plain[0]:.3f} +- {plain[1]:.3f}")
    print(f"with oversampling:    {over[0]:.3f} +- {over[1]:.3f}")


def cmd_ablate(args, settings):
    dirs = _layout(settings["out"])
    source = _source(settings)
    full_arch = net.apply_variant(source.architecture, "full")
    full_params = net.param_count(full_arch)[0]
    table = []
    for variant in ("fc7-2", "fc6-2"):
        vsettings = _fc6_2_preset(settings, args, variant)
        rows = _xval(vsettings, source, variant)
        plain, over = _summary_rows(rows)
        reduction = full_params - net.param_count(net.apply_variant(source.architecture, variant))[0]
        table.append((variant, _fmt(plain[0]), _fmt(plain[1]), _fmt(over[0]), _fmt(over[1]), reduction))
        print(f"{variant}: {plain[0]:.3f} +- {plain[1]:.3f} / {over[0]:.3f} +- {over[1]:.3f}, "
              f"parameter reduction {reduction}")
    _write_rows(dirs["reports"] / "ablation_summary.csv",
                ["architecture", "without_mean", "without_std", "with_mean", "with_std",
                 "parameter_reduction"], table)


def cmd_probe(args, settings):
    dirs = _layout(settings["out"])
    model = _source(settings, "--weights")
    ds = _dataset(settings)
    means = model.meta.get("channel_means", ds.channel_means())
    results = probe.probe_all_layers(model, ds.normalized(means), settings["k"], settings["seed"])
    probe.write_probe_reports(results, dirs["reports"] / "probe_folds.csv",
                              dirs["reports"] / "probe_summary.csv")
    for r in results:
        print(f"{r.layer:>12} {r.classifier:>8} {r.mean:.3f} +- {r.std:.3f}")


def cmd_compare_init(args, settings):
    dirs = _layout(settings["out"])
    config = solver_config(settings)
    specs = [
        zoo.SourceTaskSpec("objects", "objects", 4, settings["seed"]),
        zoo.SourceTaskSpec("scenes", "scenes", 4, settings["seed"]),
        zoo.SourceTaskSpec("sentiment", "sentiment", 6, settings["seed"]),
    ]
    sources = zoo.pretrain_sources(specs, config, settings["scale"], preprocess_for(settings["scale"]),
                                   dirs["weights"])
    inits = {**sources, "scratch": None}
    report = zoo.compare_initializations(inits, _dataset(settings), settings["k"], config,
                                         settings["scale"], settings["fold_seed"])
    report.write(dirs["reports"], dirs["logs"])
    print(f"fold assignment {report.fold_digest}")
    for init, mode, mean, std in report.summary():
        print(f"{init:>10} {'with' if mode else 'without'} oversampling: {mean:.3f} +- {std:.3f}")


def cmd_fcn_convert(args, settings):
    dirs = _layout(settings["out"])
    converted = fcn.convert_to_fcn(_source(settings, "--weights"))
    path = dirs["weights"] / "fcn.p2sw"
    zoo.save_weights(converted, path)
    print(f"wrote {path}")


def cmd_heatmap(args, settings):
    model = _source(settings, "--weights")
    fmodel = fcn.convert_to_fcn(model)
    image = ppm.load_image(args.input)
    arch = fmodel.architecture
    size = fcn.input_size_for_map(arch.input_shape[1], net.total_stride(arch), settings["map_size"])
    means = model.meta.get("channel_means", [0.0, 0.0, 0.0])
    resized = data.resize_and_normalize(image, data.PreprocessConfig(size, size, tuple(means)))
    pred = fcn.dense_predict(fmodel, resized)
    heat = fcn.render_heatmap(pred, image.shape[0], image.shape[1])
    if args.overlay:
        heat = fcn.overlay(image, heat)
    out = Path(args.out_image)
    out.parent.mkdir(parents=True, exist_ok=True)
    ppm.save_image(out, heat)
    if args.grid_csv:
        pred.write_csv(args.grid_csv)
    print(f"wrote {out} ({pred.shape[0]}x{pred.shape[1]} map)")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sentinet", formatter_class=_formatter,
                     description="CaffeNet-style visual sentiment toolkit (desk scale).")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, *groups, out_dir=True):
        p.add_argument("--config", metavar="JSON", help="run config file; flags override its values")
        if out_dir:
            p.add_argument("--out", metavar="DIR", help="output directory (default: run)")
        p.add_argument("--seed", type=int, metavar="INT", help="random seed (default: 0)")
        if "scale" in groups:
            p.add_argument("--scale", choices=("mini", "full"), help="template scale (default: mini)")
        if "data" in groups:
            p.add_argument("--manifest", metavar="CSV", help="dataset manifest path,positive_votes,total_annotators")
            p.add_argument("--agreement", type=int, choices=(3, 4, 5), help="minimum annotator consensus (default: 5)")
        if "folds" in groups:
            p.add_argument("--k", type=int, metavar="INT", help="number of folds (default: 5)")
            p.add_argument("--fold-seed", dest="fold_seed", type=int, metavar="INT",
                           help="seed of the fold assignment (default: 0)")
        if "solver" in groups:
            p.add_argument("--base-lr", dest="base_lr", type=float, metavar="FLOAT",
                           help="base learning rate (default: 0.0005; fc6-2 preset: 0.0001)")
            p.add_argument("--momentum", type=float, metavar="FLOAT", help="momentum (default: 0.9)")
            p.add_argument("--gamma", type=float, metavar="FLOAT", help="learning-rate decay factor (default: 0.1)")
            p.add_argument("--step-epochs", dest="step_epochs", type=int, metavar="INT",
                           help="epochs between decays (default: 10)")
            p.add_argument("--epochs", dest="total_epochs", type=int, metavar="INT",
                           help="training epochs (default: 30)")
            p.add_argument("--batch-size", dest="batch_size", type=int, metavar="INT",
                           help="mini-batch size (default: 32)")
            p.add_argument("--augment", action="store_true", default=None,
                           help="random crops and mirrors during training")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=_formatter))
    p.add_argument("--n", type=int, metavar="INT", help="number of images (default: 880)")
    p.add_argument("--size", type=int, metavar="PX", help="image side length (default: 63)")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train from scratch", formatter_class=_formatter),
               "scale", "data", "solver")
    p.add_argument("--variant", choices=net.VARIANTS, help="architecture variant (default: full)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("finetune", help="fine-tune from a weight file", formatter_class=_formatter),
               "scale", "data", "solver")
    p.add_argument("--from", dest="weights", metavar="WEIGHTS", help="pre-trained weight file")
    p.add_argument("--variant", choices=("full", "fc7-2", "fc6-2", "fc9"),
                   help="architecture variant (default: full)")
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("xval", help="k-fold cross-validation experiment", formatter_class=_formatter),
               "scale", "data", "folds", "solver")
    p.add_argument("--from", dest="weights", metavar="WEIGHTS", help="fine-tune from this weight file")
    p.add_argument("--variant", choices=("full", "fc7-2", "fc6-2", "fc9"),
                   help="architecture variant (default: full)")
    p.set_defaults(func=cmd_xval)

    p = common(sub.add_parser("probe", help="layer-wise linear probing table", formatter_class=_formatter),
               "scale", "data", "folds")
    p.add_argument("--weights", metavar="WEIGHTS", help="trained weight file")
    p.set_defaults(func=cmd_probe)

    p = common(sub.add_parser("ablate", help="fc7-2 and fc6-2 ablation experiments", formatter_class=_formatter),
               "scale", "data", "folds", "solver")
    p.add_argument("--from", dest="weights", metavar="WEIGHTS", help="pre-trained weight file")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("compare-init", help="compare pre-trained initializations",
                              formatter_class=_formatter), "scale", "data", "folds", "solver")
    p.set_defaults(func=cmd_compare_init)

    p = common(sub.add_parser("fcn-convert", help="convert a model to fully convolutional form",
                              formatter_class=_formatter))
    p.add_argument("--weights", metavar="WEIGHTS", help="trained weight file")
    p.set_defaults(func=cmd_fcn_convert)

    p = common(sub.add_parser("heatmap", help="render a sentiment heatmap for one image",
                              formatter_class=_formatter), out_dir=False)
    p.add_argument("--weights", metavar="WEIGHTS", help="trained weight file")
    p.add_argument("--input", required=True, metavar="PPM", help="input image (binary PPM)")
    p.add_argument("--out", dest="out_image", required=True, metavar="PPM", help="output heatmap (binary PPM)")
    p.add_argument("--overlay", action="store_true", help="blend the heatmap onto the image (alpha 0.5)")
    p.add_argument("--map-size", dest="map_size", type=int, metavar="INT",
                   help="prediction map side length (default: 4)")
    p.add_argument("--grid-csv", dest="grid_csv", metavar="CSV", help="also dump the map as CSV")
    p.set_defaults(func=cmd_heatmap)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("sentinet: a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        settings = resolve(args)
        if args.command in ("finetune", "xval") and settings["variant"] == "fc9":
            settings["variant"] = "fc9-extended"
        with np.errstate(over="ignore", invalid="ignore"):
            args.func(args, settings)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, TransferError, SurgeryError, ConversionError, SpecError, KeyError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
