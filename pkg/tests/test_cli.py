import json
import subprocess
import sys

import numpy as np
import pytest

from sentinel.cli import main, parse_deviations, parse_segments
from sentinel.profiles import Segment


def test_parse_segments():
    assert parse_segments("60:0;120:20;90:20-80") == [Segment(60, 0.0), Segment(120, 20.0), Segment(90, 20.0, 80.0)]
    with pytest.raises(ValueError, match="bad segment"):
        parse_segments("60-0")


def test_parse_deviations():
    assert parse_deviations("6:0.95, 2:0.9") == {6: 0.95, 2: 0.9}
    assert parse_deviations("") == {}
    with pytest.raises(ValueError, match="bad deviation"):
        parse_deviations("6=0.9")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Profile, two small chambers and a trained model produced through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["profile", "gen-artificial", "--segments", "60:0;600:30;780:10-60", "-o", str(d / "p.csv")]) == 0
    sim = ["simulate", "--profile", str(d / "p.csv"), "--sensors", "5", "--heater-period", "720"]
    assert main(sim + ["--seed", "1", "-o", str(d / "train")]) == 0
    assert main(sim + ["--seed", "1", "--stream", "2", "--deviate", "1:0.5", "-o", str(d / "test")]) == 0
    assert main(["train", "--train", str(d / "train"), "--window", "4", "--epochs", "2", "--hidden", "4",
                 "-o", str(d / "model.json")]) == 0
    return d


def test_profile_commands(tmp_path, capsys):
    assert main(["profile", "gen-realistic", "--seed", "3", "-o", str(tmp_path / "r.csv")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["samples"] == 24 and info["resolution"] == "per_hour"
    assert main(["profile", "import", str(tmp_path / "r.csv")]) == 0
    back = json.loads(capsys.readouterr().out)
    assert {k: v for k, v in back.items() if k != "label"} == {k: v for k, v in info.items() if k != "label"}
    assert main(["profile", "gen-artificial", "--random", "4"]) == 0


def test_predict_and_metrics(workdir, capsys):
    out = workdir / "pred.csv"
    assert main(["predict", "--model", str(workdir / "model.json"), "--data", str(workdir / "test"),
                 "-o", str(out)]) == 0
    table = np.loadtxt(out, delimiter=",", skiprows=1)
    assert table.shape == (120, 7)
    capsys.readouterr()
    assert main(["metrics", "--model", str(workdir / "model.json"), "--data", str(workdir / "test")]) == 0
    m = json.loads(capsys.readouterr().out)
    assert set(m["per_sensor"]) == {"0", "1", "2", "3", "4"} and m["overall"]["rmse"] > 0


def test_explain_rank_detect_chain(workdir, capsys):
    d = workdir
    assert main(["explain", "--model", str(d / "model.json"), "--dataset", str(d / "test"),
                 "--baselines-from", str(d / "train"), "--baseline", "train", "--n-baselines", "2",
                 "--steps", "2", "--heatmaps", str(d / "heat"), "-o", str(d / "attr.npz")]) == 0
    assert len(list((d / "heat").glob("*.csv"))) == 5
    assert main(["rank", "--attrib", str(d / "attr.npz"), "-o", str(d / "rank.json")]) == 0
    capsys.readouterr()
    assert main(["detect", "--rankings", str(d / "rank.json"), "--truth", str(d / "test"),
                 "-o", str(d / "det")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert "outcome" in out and (d / "det" / "similarity_euclidean.csv").exists()


def test_error_exit_codes(tmp_path, capsys):
    assert main(["profile", "gen-artificial", "--segments", "60:x"]) == 2
    assert main(["profile", "import", str(tmp_path / "nope.csv")]) == 2
    assert main(["run", "detect", "--config", str(tmp_path / "nope.json"), "-o", str(tmp_path)]) == 2
    bad = tmp_path / "policy.json"
    bad.write_text('{"kmad": 3}')
    rank = tmp_path / "r.json"
    rank.write_text("{}")
    assert main(["detect", "--rankings", str(rank), "--policy", str(bad), "-o", str(tmp_path / "o")]) == 2
    assert "sentinel: error" in capsys.readouterr().err


def test_run_with_config_file(tmp_path):
    cfg = {"n_sensors": 6, "deviations": {"2": 0.6}, "sensor": {"heater_period": 720.0}, "repetitions": 1,
           "train": {"epochs": 2, "window": 8, "hidden": 8}, "attribution": {"n_baselines": 2, "steps": 2}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "detect", "--config", str(path), "--seed", "1", "-o", str(tmp_path / "out")]) == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["master_seed"] == 1 and manifest["config"]["n_sensors"] == 6


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sentinel", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
