import json
import subprocess
import sys
from pathlib import Path

import pytest

from cbtfed.cli import main
from cbtfed.data import read_population

TINY = str(Path(__file__).parent / "data" / "tiny.yaml")


def test_synth(tmp_path, capsys):
    assert main(["synth", "--config", TINY, "--out", str(tmp_path)]) == 0
    pop = read_population(tmp_path / "A.mgt1")
    assert pop.tensors.shape == (8, 6, 6, 2)


def test_partition(tmp_path):
    out = tmp_path / "p.json"
    assert main(["partition", "--config", TINY, "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert set(doc) == {"A", "B"} and len(doc["A"]["folds"]) == 2


def test_train_eval_report(tmp_path, capsys):
    for mode in ("fedcbt", "dgn"):
        assert main(["train", "--config", TINY, "--mode", mode, "--out", str(tmp_path / mode),
                     "--fed.t_max", "2"]) == 0
    assert json.loads((tmp_path / "dgn" / "manifest.json").read_text())["config"]["fed"]["t_max"] == 2
    assert main(["eval", "--run", str(tmp_path / "dgn")]) == 0
    assert main(["report", str(tmp_path / "fedcbt"), str(tmp_path / "dgn"), "--designated", "fedcbt",
                 "--out", str(tmp_path / "rep")]) == 0
    assert "fedcbt" in capsys.readouterr().out
    assert (tmp_path / "rep" / "ttest_A.csv").is_file()


@pytest.mark.parametrize("argv, stage", [
    (["train", "--mode", "fedcbt", "--fed.participation", "1.5"], "[config]"),
    (["train", "--mode", "fedcbt", "--fed.bogus", "1"], "[config]"),
    (["synth", "--out", "x", "stray"], "[config]"),
    (["eval", "--run", "/nonexistent/run"], "[report]"),
    (["report", "/nonexistent/run"], "[report]"),
])
def test_errors_are_stage_tagged(argv, stage, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("cbtfed: error ") and stage in err


def test_missing_data_file(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"data: {{paths: [{tmp_path / 'none.mgt1'}]}}\n")
    assert main(["train", "--config", str(cfg), "--mode", "dgn", "--out", str(tmp_path / "r")]) == 1
    assert "[data]" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cbtfed", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "synth" in out.stdout
    bad = subprocess.run([sys.executable, "-m", "cbtfed", "train"], capture_output=True, text=True)
    assert bad.returncode == 2
