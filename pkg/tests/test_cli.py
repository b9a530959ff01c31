import json

import numpy as np
import pytest

from advwt.cli import main
from advwt.config import SCHEMA
from advwt.imaging import load_image, save_image


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "gen", "--n-per-class", "5", "--resolution", "32", "--out", str(root / "data")]) == 0
    assert main(["classifier", "train", "--manifest", str(root / "data" / "manifest.json"), "--arch", "linear",
                 "--epochs", "3", "--name", "lin", "--out", str(root / "models")]) == 0
    return root


def test_dataset_and_classifier(workspace, capsys):
    assert (workspace / "models" / "lin.awtm").exists()
    assert main(["classifier", "eval", "--manifest", str(workspace / "data" / "manifest.json"),
                 "--model", str(workspace / "models" / "lin.awtm")]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0 <= out["accuracy"] <= 1


def test_attack_run_report_replay(workspace, capsys):
    cfg = workspace / "fast.json"
    cfg.write_text(json.dumps({"schema": SCHEMA, "experiment": "attack",
                               "attack": {"steps_K": 2, "samples_T": 3}}))
    run = workspace / "run"
    assert main(["attack", "run", "--manifest", str(workspace / "data" / "manifest.json"),
                 "--model", str(workspace / "models" / "lin.awtm"), "--config", str(cfg), "--out", str(run)]) == 0
    printed = capsys.readouterr().out
    assert "[attack] model,benign_error,asr" in printed
    assert (run / "attack.csv").exists() and (run / "attack.svg").exists()
    assert main(["report", str(run), "--formats", "csv", "--out", str(workspace / "rep")]) == 0
    assert (workspace / "rep" / "attack.csv").read_text() == (run / "attack.csv").read_text()
    assert main(["replay", str(run)]) == 0
    assert "identical" in capsys.readouterr().out


def test_damage_render_and_analyze(workspace):
    img = workspace / "clean.png"
    save_image(np.full((32, 32, 3), 0.6, np.float32), img)
    out = workspace / "dmg.png"
    assert main(["damage", "render", str(img), "--seed", "1", "--scale", "3", "--out", str(out)]) == 0
    assert load_image(out).shape == (32, 32, 3)
    code = json.loads((workspace / "dmg.png.code.json").read_text())
    assert len(code) == 64
    zero = workspace / "zero.json"
    zero.write_text(json.dumps([0.0] * 64))
    assert main(["damage", "render", str(img), "--code", str(zero), "--out", str(workspace / "same.png")]) == 0
    assert np.array_equal(load_image(workspace / "same.png"), load_image(img))
    pairs = workspace / "pairs.json"
    pairs.write_text(json.dumps([{"id": "p", "adversarial": "dmg.png", "clean": "clean.png"}]))
    assert main(["analyze", str(pairs), "--out", str(workspace / "an")]) == 0
    assert (workspace / "an" / "analysis.csv").read_text().startswith("pairs,fourier_entropy_bits")


def test_ganmath_selftest(capsys):
    assert main(["ganmath", "selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["nosuchgroup"],
    ["attack", "run"],
    ["attack", "run", "--manifest", "x.json"],
    ["transfer", "run", "--config", "/nonexistent.json"],
    ["classifier", "train"],
    ["ganmath", "selftest", "--jobs", "0"],
])
def test_usage_and_config_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "config error" in capsys.readouterr().err


def test_wrong_experiment_kind_exits_1(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema": SCHEMA, "experiment": "attack", "models": [{"name": "m"}]}))
    assert main(["ood", "run", "--config", str(p)]) == 1


def test_runtime_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert main(["damage", "render", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
