import json

import pytest
from click.testing import CliRunner

from conftest import CITY_NOTES, DEMO
from record_cassette import record
from ted.cli import main
from ted.datasets import load_dataset

CSVS = ("per_sample_metrics.csv", "aggregate_metrics.csv", "curves.csv", "scatter.csv")
CONFIG = str(DEMO / "config.yaml")


def invoke(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


@pytest.fixture(scope="module")
def demo_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("demo")
    results = [invoke("run", "--config", CONFIG, "--out", str(base / name)) for name in ("a", "b")]
    return base, results


def test_demo_run_is_byte_identical_across_runs(demo_runs):
    base, results = demo_runs
    assert [r.exit_code for r in results] == [0, 0], results[0].output
    for name in CSVS:
        a = (base / "a" / "runs" / "demo" / "report" / name).read_bytes()
        b = (base / "b" / "runs" / "demo" / "report" / name).read_bytes()
        assert a == b and a.count(b"\n") > 1


def test_summary_tables(demo_runs):
    base, _ = demo_runs
    summary = (base / "a" / "runs" / "demo" / "report" / "summary.md").read_text()
    assert "## toy (k=1, threshold=1)" in summary and "## toy (k=3, threshold=1)" in summary
    header = next(line for line in summary.splitlines() if line.startswith("| Agent"))
    for col in ("MeanProg@k", "MaxProg@k", "MaxAUC@k", "MaxPPT@k", "pass@k", "pass^k"):
        assert col in header
    assert "| toy-agent |" in summary
    assert json.loads((base / "a" / "runs" / "demo" / "report" / "failures.json").read_text()) == []


def test_rerun_without_resume_is_refused(demo_runs):
    base, _ = demo_runs
    out = str(base / "a")
    refused = invoke("run", "--config", CONFIG, "--out", out)
    assert refused.exit_code != 0 and "--resume" in refused.output
    resumed = invoke("run", "--config", CONFIG, "--out", out, "--resume")
    assert resumed.exit_code == 0, resumed.output


def test_report_without_artifacts_says_no_results(tmp_path):
    result = CliRunner().invoke(main, ["report", "--config", CONFIG, "--out", str(tmp_path)])
    assert result.exit_code != 0
    assert "no results" in result.output.lower()
    assert "No results" in (tmp_path / "runs" / "demo" / "report" / "summary.md").read_text()


def test_k_above_trials_is_a_usage_error(tmp_path):
    result = invoke("run", "--config", CONFIG, "--out", str(tmp_path), "--k", "4")
    assert result.exit_code != 0 and "exceeds" in result.output
    assert not (tmp_path / "runs").exists()


def test_diagnose_augments_instruction(demo_runs, tmp_path):
    base, _ = demo_runs
    instruction = tmp_path / "agent.txt"
    instruction.write_text("You help users manage their phone settings.\n")
    notes = tmp_path / "notes.txt"
    notes.write_text("Always read back the final settings\n\n")
    out = tmp_path / "augmented.txt"
    args = ["diagnose", "--config", CONFIG, "--out", str(base / "a"), "--augment-instruction", str(instruction),
            "--augmented-out", str(out), "--human-notes", str(notes)]
    result = invoke(*args)
    assert result.exit_code == 0, result.output
    text = out.read_text()
    assert text.startswith("You help users manage their phone settings.")
    assert "- Missing set_cellular_status call" in text
    assert "- Always read back the final settings" in text
    assert instruction.read_text() == "You help users manage their phone settings.\n"
    # augmenting the augmented file in place changes nothing
    again = invoke("diagnose", "--config", CONFIG, "--out", str(base / "a"), "--augment-instruction", str(out),
                   "--human-notes", str(notes))
    assert again.exit_code == 0 and out.read_text() == text


def test_convert_then_promote(tmp_path):
    scenarios = tmp_path / "scenarios.json"
    scenarios.write_text(json.dumps([{
        "scenario_name": "find_current_city_low_battery_mode",
        "description": "User asks which city they are in while in low battery mode.",
        "milestones": [
            {"index": 0, "constraint_type": "snapshot_similarity", "details": "low battery mode off"},
            {"index": 1, "constraint_type": "snapshot_similarity", "details": "wifi on"},
        ],
        "dag_edges": [[0, 1]],
    }]))
    script = tmp_path / "script.json"
    script.write_text(json.dumps([json.dumps([CITY_NOTES[0], CITY_NOTES[2]])]))
    staged = tmp_path / "staged.json"
    result = invoke("convert", "--scenarios", str(scenarios), "--out", str(staged), "--provider", f"scripted:{script}")
    assert result.exit_code == 0, result.output
    dataset = tmp_path / "dataset.json"
    result = invoke("promote", str(staged), "--dataset", str(dataset))
    assert result.exit_code == 0, result.output
    (sample,) = load_dataset(dataset)
    assert [n.text for n in sample.grading_notes] == [CITY_NOTES[0], CITY_NOTES[2]]


def test_demo_cassette_is_reproducible(tmp_path):
    fresh = tmp_path / "cassette.json"
    record(fresh)
    assert json.loads(fresh.read_text()) == json.loads((DEMO / "cassette.json").read_text())
