import json
import subprocess
import sys
from pathlib import Path

import pytest

from hcpr.cli import main

SMALL = str(Path(__file__).resolve().parents[1] / "configs" / "small.yaml")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_adapt_then_evaluate_consolidate_analyze(tmp_path, capsys):
    run_dir = tmp_path / "run"
    code, out, _ = run(capsys, "adapt", "--config", SMALL, "--output-dir", str(run_dir))
    assert code == 0
    summary = json.loads(out)
    assert summary["output_dir"] == str(run_dir) and "history" not in summary

    code, out, _ = run(capsys, "evaluate", "--config", SMALL, "--checkpoint", str(run_dir / "final.pt"))
    assert code == 0 and json.loads(out)["accuracy"] == pytest.approx(summary["final_accuracy"])

    code, out, _ = run(capsys, "consolidate", "--config", SMALL, "--checkpoint", str(run_dir / "pre_adapt.pt"),
                       "--output-dir", str(tmp_path / "cons"))
    assert code == 0 and json.loads(out)["selected"] == summary["pseudo_count"]
    assert (tmp_path / "cons" / "consolidation.json").exists()

    code, out, _ = run(capsys, "analyze", "--run", str(run_dir))
    rows = {r["method"]: r for r in json.loads(out)}
    assert code == 0
    assert set(rows) == {"selected", "source_confidence", "pa_confidence", "hcpr_only", "pa_hcpr"}
    assert rows["selected"]["quantity_pct"] == summary["quantity_pct"]
    assert rows["pa_hcpr"]["count"] == summary["pseudo_count"]
    assert (run_dir / "pseudo_labels_analysis.csv").exists()


def test_make_data_and_train_source(tmp_path, capsys):
    code, out, _ = run(capsys, "make-data", "--config", SMALL, "--out", str(tmp_path / "data"))
    assert code == 0
    paths = json.loads(out)
    assert Path(paths["source"]).exists() and paths["n_target"] == 120
    manifest_run = ["--set", "data.kind=manifest", "--set", f"data.source_manifest={paths['source']}",
                    "--set", f"data.target_manifest={paths['target']}"]
    code, out, _ = run(capsys, "train-source", "--config", SMALL, *manifest_run, "--out", str(tmp_path / "s.pt"))
    assert code == 0 and (tmp_path / "s.pt").exists()
    assert 0.0 <= json.loads(out)["target_accuracy"] <= 100.0


def test_config_errors_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "adapt", "--config", SMALL, "--set", "selection.tau1_pct=5",
                       "--set", "selection.tau2_pct=1", "--output-dir", str(tmp_path))
    assert code == 2 and "stage 'config'" in err and "tau1_pct" in err
    code, _, err = run(capsys, "adapt", "--config", str(tmp_path / "missing.yaml"))
    assert code == 2 and "does not exist" in err


def test_stage_failure_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "adapt", "--config", SMALL, "--output-dir", str(tmp_path),
                       "--set", "selection.tau1_pct=0.3", "--set", "selection.tau2_pct=1.5")
    assert code == 2 and "stage 'ssl' failed" in err
    assert json.loads((tmp_path / "failure.json").read_text())["stage"] == "ssl"


def test_other_errors_exit_1(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--config", SMALL, "--checkpoint", str(tmp_path / "nope.pt"))
    assert code == 1 and "stage 'evaluate'" in err


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "hcpr.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("make-data", "train-source", "adapt", "consolidate", "evaluate", "analyze"):
        assert command in proc.stdout
