import csv
import json
import shutil
import subprocess

import pytest

from conftest import SMALL_CONFIG
from thmrom import cli


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    cfg = dict(SMALL_CONFIG)
    cfg["greedy"] = {"grid": {"dims": [{"name": "kappa", "range": [1e-5, 1e-3], "n": 2}]},
                     "test_grid": {"dims": [{"name": "kappa", "range": [1e-5, 1e-3], "n": 3}]},
                     "max_iters": 2, "target": 0.0}
    p = tmp_path_factory.mktemp("cfg") / "study.json"
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture(scope="module")
def study_dir(config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    assert cli.main(["greedy", "--config", str(config_file), "--out", str(out), "--reproduction", "--qoi"]) == 0
    return out


def test_usage_without_command(capsys):
    assert cli.main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_greedy_writes_study(study_dir, capsys):
    for name in ("greedy.json", "greedy_decay.csv", "training_errors.csv", "test_errors.csv",
                 "model/Z_u.snap", "model/eq_rule.json", "reproduction/reproduction.json",
                 "runs/anchor/qoi_fom.csv", "runs/anchor/rom_run.json"):
        assert (study_dir / name).exists(), name
    with open(study_dir / "test_errors.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["kappa", "E_avg"] and len(rows) == 4


def test_fom_and_rom_runs(config_file, study_dir, tmp_path, capsys):
    fom = tmp_path / "fom"
    assert cli.fom_run_main(["--config", str(config_file), "--mu", "kappa=1e-4", "--out", str(fom)]) == 0
    assert (fom / "u.snap").read_bytes().startswith(b"SNAP1 ")
    assert json.loads((fom / "run.json").read_text())["mu"] == {"kappa": 1e-4}
    rom = tmp_path / "rom"
    assert cli.rom_run_main(["--model", str(study_dir / "model"), "--mu", "kappa=1e-4",
                             "--replay-times", str(fom), "--out", str(rom)]) == 0
    run = json.loads((rom / "rom_run.json").read_text())
    assert run["E_avg"] <= 5e-2 and run["speedup"] > 0
    assert "E_avg=" in capsys.readouterr().out


def test_report_renders_figures(study_dir, tmp_path):
    out = tmp_path / "report"
    assert cli.report_main(["--study", str(study_dir), "--out", str(out)]) == 0
    index = json.loads((out / "report.json").read_text())
    assert index["missing"] == []
    pngs = [f for f in index["written"] if f.endswith(".png")]
    assert len(pngs) >= 4
    for f in index["written"]:
        assert (out / f).stat().st_size > 0
    # every figure has its data next to it
    data = {f.rsplit(".", 1)[0] for f in index["written"] if not f.endswith(".png")}
    assert {p.rsplit(".", 1)[0] for p in pngs} <= data


def test_report_lists_missing_inputs(tmp_path):
    assert cli.report_main(["--study", str(tmp_path)]) == 0
    index = json.loads((tmp_path / "report" / "report.json").read_text())
    assert index["written"] == [] and len(index["missing"]) == 3


@pytest.mark.skipif(shutil.which("thmrom") is None, reason="package scripts not installed")
def test_console_script():
    r = subprocess.run(["thmrom"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr
