import json

from ghnforge.models import EvalReport, EvalRow, RunManifest
from ghnforge.run_recorder import MetricsWriter, RunRecorder, atomic_write_json, read_csv


def _row(step):
    return {"step": step, "epoch": 0, "lr": 1e-3, "ce": 1.0, "reg": 0.5, "loss": 1.1,
            "grad_norm": 0.3, "wallclock": 0.01 * step, "extra": "ignored"}


def test_metrics_writer_keeps_rows_on_reset(tmp_path):
    writer = MetricsWriter(tmp_path / "metrics.csv")
    writer.reset()
    for step in range(5):
        writer.append(_row(step))
    writer.reset(keep_until_step=2)
    writer.append(_row(3))
    rows = read_csv(writer.path)
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert "extra" not in rows[0]

    writer.reset()
    assert read_csv(writer.path) == []


def test_atomic_write_leaves_no_temp_file(tmp_path):
    path = tmp_path / "nested" / "data.json"
    atomic_write_json(path, {"b": 1, "a": [1, 2]})
    assert json.loads(path.read_text()) == {"a": [1, 2], "b": 1}
    assert list(path.parent.iterdir()) == [path]


def test_manifest(tmp_path):
    recorder = RunRecorder(tmp_path / "run")
    path = recorder.write_manifest(RunManifest(command="train", config_hash="ab" * 32, seed=3,
                                               version="0.1.0", threads=2))
    data = json.loads(path.read_text())
    assert data["command"] == "train"
    assert data["seed"] == 3
    assert data["rss_mb"] > 0
    assert "created_at" in data


def test_report_json_and_csv(tmp_path):
    report = EvalReport(protocol="no_finetune", top_k=1, rows=[
        EvalRow(arch="a", init="predicted", accuracy=30.0),
        EvalRow(arch="b", init="predicted", accuracy=50.0),
    ], errors=["c: RuntimeError: boom"])
    recorder = RunRecorder(tmp_path)
    path = recorder.write_report(report)
    data = json.loads(path.read_text())
    assert data["summary"]["predicted"]["mean"] == 40.0
    assert data["summary"]["predicted"]["top_mean"] == 50.0
    assert data["errors"] == ["c: RuntimeError: boom"]
    rows = read_csv(tmp_path / "no_finetune.csv")
    assert [r["arch"] for r in rows] == ["a", "b"]
    assert list(rows[0]) == ["arch", "init", "steps", "accuracy", "lr"]


def test_plot_data_pads_short_series(tmp_path):
    recorder = RunRecorder(tmp_path)
    path = recorder.write_plot_data("variance_x", {"random": [1.0, 2.0, 3.0], "ghn": [0.5]})
    assert path == tmp_path / "plots" / "variance_x.csv"
    rows = read_csv(path)
    assert list(rows[0]) == ["layer", "ghn", "random"]
    assert [r["ghn"] for r in rows] == ["0.5", "", ""]
    assert [r["layer"] for r in rows] == ["0", "1", "2"]
