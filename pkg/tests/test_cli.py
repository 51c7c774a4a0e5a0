import json
import logging
import os
from pathlib import Path

import pytest

from sentinet import cli, zoo

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["synth", "train", "finetune", "xval", "probe", "ablate", "compare-init", "fcn-convert", "heatmap"]


def _help(capsys, argv):
    assert cli.run(argv + ["--help"]) == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("command", [None] + COMMANDS)
def test_help_matches_golden(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")
    text = _help(capsys, [command] if command else [])
    path = GOLDEN / f"help_{command or 'main'}.txt"
    if os.environ.get("SENTINET_REGEN_GOLDEN"):
        path.write_text(text)
    assert text == path.read_text()


@pytest.mark.parametrize("command", COMMANDS)
def test_help_documents_every_flag(command, capsys):
    text = _help(capsys, [command])
    sub = next(a for a in cli.build_parser()._actions if a.dest == "command").choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_usage_errors(capsys):
    assert cli.run([]) == 1
    assert cli.run(["train", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err
    assert cli.run(["frobnicate"]) == 1
    assert cli.run(["train", "--out", "x"]) == 1  # --manifest missing
    assert "--manifest" in capsys.readouterr().err


def test_config_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"k": 3, "learning_rate": 0.1}))
    assert cli.run(["xval", "--config", str(cfg)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"k": 3, "seed": 9, "base_lr": 0.5}))
    args = cli.build_parser().parse_args(["xval", "--config", str(cfg), "--seed", "2"])
    settings = cli.resolve(args)
    assert (settings["k"], settings["seed"], settings["base_lr"]) == (3, 2, 0.5)
    assert settings["total_epochs"] == cli.DEFAULTS["total_epochs"]


def test_data_errors(tmp_path, capsys):
    assert cli.run(["train", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2
    assert "none.csv" in capsys.readouterr().err
    assert cli.run(["fcn-convert", "--weights", str(tmp_path / "w.p2sw"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.run(["xval", "--config", str(bad)]) == 2


def test_numeric_failure(tiny_dataset, tmp_path, capsys):
    code = cli.run(["train", "--manifest", str(tiny_dataset), "--agreement", "3", "--base-lr", "1e8",
                    "--epochs", "2", "--out", str(tmp_path)])
    assert code == 3
    assert "iteration" in capsys.readouterr().err


def _pipeline(root, manifest):
    out = root / "run"
    common = ["--manifest", str(manifest), "--agreement", "3", "--out", str(out)]
    assert cli.run(["train", *common, "--epochs", "2", "--seed", "1"]) == 0
    weights = out / "weights" / "scratch.p2sw"
    assert cli.run(["xval", *common, "--k", "2", "--epochs", "1"]) == 0
    assert cli.run(["fcn-convert", "--weights", str(weights), "--out", str(out)]) == 0
    image = manifest.parent / "images" / "img_0000.ppm"
    assert cli.run(["heatmap", "--weights", str(weights), "--input", str(image),
                    "--out", str(out / "heatmaps" / "h.ppm"), "--overlay",
                    "--grid-csv", str(out / "heatmaps" / "grid.csv")]) == 0
    return out


def test_end_to_end_determinism(tiny_dataset, tmp_path):
    a = _pipeline(tmp_path / "a", tiny_dataset)
    b = _pipeline(tmp_path / "b", tiny_dataset)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert {p.parts[0] for p in files} == {"logs", "weights", "reports", "heatmaps"}
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    summary = (a / "reports" / "xval_summary.csv").read_text().splitlines()
    assert summary[0] == "oversample,mean,std"
    assert [line.split(",")[0] for line in summary[1:]] == ["0", "1"]
    fcn_model = zoo.load_weights(a / "weights" / "fcn.p2sw")
    assert fcn_model.architecture.fully_convolutional


def test_synth_command(tmp_path, capsys):
    assert cli.run(["synth", "--n", "6", "--size", "16", "--seed", "3", "--out", str(tmp_path / "d")]) == 0
    lines = (tmp_path / "d" / "manifest.csv").read_text().splitlines()
    assert len(lines) == 7


def test_finetune_fc6_2_logs_preset(tiny_dataset, tmp_path, caplog):
    out = tmp_path / "run"
    common = ["--manifest", str(tiny_dataset), "--agreement", "3", "--out", str(out), "--epochs", "1"]
    assert cli.run(["train", *common]) == 0
    with caplog.at_level(logging.INFO, logger="sentinet"):
        assert cli.run(["finetune", "--from", str(out / "weights" / "scratch.p2sw"), "--variant", "fc6-2",
                        *common]) == 0
    assert "fc6-2 preset: base_lr 0.0001" in caplog.text
    assert (out / "weights" / "finetune_fc6-2.p2sw").is_file()
    caplog.clear()
    with caplog.at_level(logging.INFO, logger="sentinet"):
        assert cli.run(["finetune", "--from", str(out / "weights" / "scratch.p2sw"), "--variant", "fc9",
                        *common]) == 0
    assert "preset" not in caplog.text
    model = zoo.load_weights(out / "weights" / "finetune_fc9-extended.p2sw")
    assert "fc9_twitter.weight" in model.params


def test_probe_ablate_compare(tiny_dataset, tmp_path, capsys):
    out = tmp_path / "run"
    common = ["--manifest", str(tiny_dataset), "--agreement", "3", "--out", str(out)]
    assert cli.run(["train", *common, "--epochs", "1"]) == 0
    weights = str(out / "weights" / "scratch.p2sw")
    assert cli.run(["probe", "--weights", weights, "--k", "2", *common]) == 0
    summary = (out / "reports" / "probe_summary.csv").read_text().splitlines()
    assert len(summary) == 1 + 13 * 2 and summary[1].startswith("fc8_twitter,svm,")
    assert cli.run(["ablate", "--from", weights, "--k", "2", "--epochs", "1", *common]) == 0
    rows = (out / "reports" / "ablation_summary.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["fc7-2", "fc6-2"]
    assert rows[0].endswith("parameter_reduction")
    assert cli.run(["compare-init", "--k", "2", "--epochs", "1", *common]) == 0
    names = sorted(p.name for p in (out / "weights").iterdir())
    assert {"objects.p2sw", "scenes.p2sw", "sentiment.p2sw"} <= set(names)
    inits = {r.split(",")[0] for r in (out / "reports" / "compare_init_summary.csv").read_text().splitlines()[1:]}
    assert inits == {"objects", "scenes", "sentiment", "scratch"}
    assert "fold assignment" in capsys.readouterr().out
