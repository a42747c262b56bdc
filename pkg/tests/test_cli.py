import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from promptdil.harness.cli import main
from promptdil.harness.report import METRIC_COLUMNS

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.toml"


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(SMOKE), "--seed", "1", "--out-dir", str(out)]) == 0
    return out


def test_run_writes_artifacts(smoke_run):
    names = set(files(smoke_run))
    for expected in ("config.json", "metrics.csv", "summary.json", "rmatrix.json", "xcomp.json",
                     "checkpoint.json", "trace.json", "plots/uw_weights.svg"):
        assert expected in names
    assert any(n.startswith("plots/selection_layer") for n in names)
    assert any(n.startswith("plots/usage_hist_stage") for n in names)
    summary = json.loads((smoke_run / "summary.json").read_text())
    assert summary["seed"] == 1 and summary["stages"] == 2
    assert {"avg_acc", "avg_f", "mean_drift", "expansion", "rmatrix"} <= set(summary)


def test_run_twice_identical(smoke_run, tmp_path):
    assert main(["run", "--config", str(SMOKE), "--seed", "1", "--out-dir", str(tmp_path)]) == 0
    assert files(tmp_path) == files(smoke_run)


def test_report_csv_schema(smoke_run, capsys):
    (smoke_run / "metrics.csv").unlink()
    assert main(["report", "--out-dir", str(smoke_run)]) == 0
    with open(smoke_run / "metrics.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        assert reader.fieldnames == list(METRIC_COLUMNS)
    keys = [(r["stage"], r["epoch"]) for r in rows]
    assert len(keys) == len(set(keys)) == 2
    assert all(r["w_ce"] != "" for r in rows)
    assert json.loads(capsys.readouterr().out)["plots"]


def test_xcomp_command(smoke_run, capsys):
    before = (smoke_run / "xcomp.json").read_bytes()
    assert main(["xcomp", "--out-dir", str(smoke_run)]) == 0
    assert (smoke_run / "xcomp.json").read_bytes() == before
    assert "head_swap_drop" in json.loads(capsys.readouterr().out)


def test_drift_command(tmp_path, capsys):
    assert main(["drift", "--config", str(SMOKE), "--pair", "1,2", "--out-dir", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pair"] == [1, 2] and out["mean_drift"] >= 0
    assert (tmp_path / "drift.json").exists()


def test_ablate_drop_pseudo(tmp_path):
    assert main(["ablate", "--config", str(SMOKE), "--drop", "pseudo", "--out-dir", str(tmp_path), "--no-plots"]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config"]["drop"] == ["pseudo"]
    assert "pseudo" not in summary["uw_log_variance"] or summary["uw_log_variance"]["pseudo"] == 0.0
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["loss_pseudo"] == "" for r in rows)
    assert rows[-1]["loss_real"] != ""


def test_exit_codes(tmp_path, capsys):
    assert main(["run", "--config", str(SMOKE), "--drop", "bogus", "--out-dir", str(tmp_path)]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("no_such_key = 1\n")
    assert main(["run", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["run", "--config", str(SMOKE), "--severity", "2.0", "--out-dir", str(tmp_path)]) == 2
    assert main(["drift", "--config", str(SMOKE), "--pair", "1,5"]) == 2
    assert main(["report", "--out-dir", str(tmp_path / "nothing")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["run", "--bogus-flag"])
    assert exc.value.code == 2


def test_numerical_abort_exit_code(tmp_path, monkeypatch):
    from promptdil.exceptions import NumericalAbort
    from promptdil.harness import experiment

    def explode(*args, **kwargs):
        raise NumericalAbort("ce", float("nan"))

    monkeypatch.setattr(experiment, "run_experiment", explode)
    assert main(["run", "--config", str(SMOKE), "--out-dir", str(tmp_path)]) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "promptdil", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "ablate" in proc.stdout
