import json

from groundplan.cli import main


def test_synth_eval_report_overlay(tmp_path, capsys):
    bench = tmp_path / "bench"
    assert main(["synth", "--out", str(bench), "--episodes", "6", "--max-units", "5"]) == 0
    results = tmp_path / "r.jsonl"
    assert main(["eval", "--dataset", str(bench / "dataset.jsonl"), "--out", str(results),
                 "--instructions", "explicit", "--thresholds", "0.5,0.5"]) == 0
    assert len(results.read_text().splitlines()) == 6
    assert main(["report", "--results", str(results), "--format", "csv", "--out", str(tmp_path / "t.csv")]) == 0
    assert (tmp_path / "t.png").exists()
    assert "100.0" in (tmp_path / "t.csv").read_text()
    assert main(["overlay", "--results", str(results), "--episode", "syn-0000", "--out", str(tmp_path / "o.png")]) == 0
    assert (tmp_path / "o.png").exists()
    assert main(["overlay", "--results", str(results), "--out", str(tmp_path / "all")]) == 0
    assert len(list((tmp_path / "all").glob("*.png"))) == 6


def test_report_to_stdout(tmp_path, capsys):
    (tmp_path / "r.jsonl").write_text("")
    assert main(["report", "--results", str(tmp_path / "r.jsonl"), "--format", "markdown"]) == 0
    assert capsys.readouterr().out.startswith("| run | TSR E-short")


def test_synth_demo_and_datagen(tmp_path):
    demo = tmp_path / "demo"
    assert main(["synth", "--kind", "demo", "--out", str(demo), "--episodes", "3",
                 "--inject-low-consistency", "demo-0001"]) == 0
    script = f"mock://script?file={demo / 'script.json'}"
    out = tmp_path / "samples.jsonl"
    assert main(["datagen", "--manifest", str(demo / "manifest.jsonl"), "--out", str(out),
                 "--planner-endpoint", script, "--grounder-endpoint", script]) == 0
    stats = json.loads((tmp_path / "samples.stats.json").read_text())
    assert stats["n_samples"] == 2 and list(stats["dropped"]) == ["demo-0001"]


def test_bad_arguments_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--dataset", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "r.jsonl")]) == 2
    assert "error" in capsys.readouterr().err
