import json
import logging

import pytest
import torch

from ghnforge.cli import _init_param_sets, run
from ghnforge.ghn import GhnModel, save_model
from ghnforge.models import FinetuneSchedule, GhnConfig, OpKind
from ghnforge.run_recorder import read_csv, write_csv

TINY_CONFIG = """
name = "cli"
seed = 0

[space]
n_archs = 4
depth = [1, 2]
channels = [4, 8]

[ghn]
layers = 1
hidden = 16
heads = 4

[train]
epochs = 1
meta_batch = 2
data_batch = 16
log_every = 1

[data]
name = "cli-tiny"
num_classes = 4
n_train = 64
n_val = 32
image_size = 8

[eval]
batch_size = 16
top_k = 1

[eval.holdout]
name = "test"
n_archs = 2
depth = [1, 2]
channels = [4, 8]
"""


@pytest.fixture(autouse=True)
def drop_cli_handlers():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if type(handler) in (logging.StreamHandler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG)
    return path


def _last_json(text: str) -> dict:
    return json.loads(text.strip().splitlines()[-1])


def test_help_and_usage_errors(capsys):
    assert run(["--help"]) == 0
    assert "gen-space" in capsys.readouterr().out
    assert run(["train", "--no-such-flag"]) == 2
    assert run(["analyze", "--out", "unused"]) == 2


def test_unknown_config_key_exits_with_config_error(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\nbogus = 1\n")
    code = run(["gen-space", "--config", str(path), "--out", str(tmp_path / "out")])
    assert code == 2
    payload = _last_json(capsys.readouterr().err)
    assert payload["error"] == "ConfigError"
    assert payload["path"] == "train.bogus"
    assert payload["exit_code"] == 2


def test_gen_space_is_reproducible(tmp_path, config_file):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["gen-space", "--config", str(config_file), "--out", str(out)]) == 0
        outputs.append(out)
    manifests = [json.loads((out / "manifest.json").read_text()) for out in outputs]
    assert manifests[0]["config_hash"] == manifests[1]["config_hash"]
    assert manifests[0]["command"] == "gen-space"
    files_a = sorted(p.name for p in (outputs[0] / "space_train").iterdir())
    assert len(files_a) == 5
    for name in files_a:
        assert ((outputs[0] / "space_train" / name).read_bytes()
                == (outputs[1] / "space_train" / name).read_bytes())
    assert (outputs[0] / "config.json").exists()
    assert (outputs[0] / "run.log.jsonl").exists()


def test_missing_model_option(tmp_path, config_file):
    assert run(["eval", "--config", str(config_file), "--out", str(tmp_path / "o")]) == 2


def test_pipeline(tmp_path, config_file):
    out = tmp_path / "run"
    common = ["--config", str(config_file), "--threads", "1"]
    assert run(["gen-space", *common, "--out", str(out)]) == 0
    assert run(["gen-space", *common, "--out", str(out), "--split", "test"]) == 0
    assert run(["train", *common, "--out", str(out / "train"),
                "--space", str(out / "space_train")]) == 0
    model = out / "train" / "model.ghn"
    assert model.exists()
    assert [int(r["step"]) for r in read_csv(out / "train" / "metrics.csv")] == [0, 1]

    assert run(["predict", *common, "--out", str(out / "predict"), "--model", str(model),
                "--graph", str(out / "space_test")]) == 0
    predicted = sorted(p.name for p in (out / "predict" / "predicted").glob("*.params"))
    assert predicted == ["test_0000.params", "test_0001.params"]

    assert run(["eval", *common, "--out", str(out / "eval"), "--model", str(model),
                "--space", str(out / "space_test")]) == 0
    report = json.loads((out / "eval" / "no_finetune.json").read_text())
    assert report["errors"] == []
    assert len(report["rows"]) == 2


def test_analyze_tau(tmp_path):
    columns = ["arch", "init", "steps", "accuracy", "lr"]
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(first, [{"arch": a, "init": "predicted", "accuracy": acc}
                      for a, acc in [("x", 10), ("y", 20), ("z", 30)]], columns)
    write_csv(second, [{"arch": a, "init": "predicted", "accuracy": acc}
                       for a, acc in [("x", 30), ("y", 20), ("z", 10)]], columns)
    out = tmp_path / "tau"
    assert run(["analyze", "--out", str(out), "--tau",
                "--reports", str(first), "--reports", str(second)]) == 0
    data = json.loads((out / "tau.json").read_text())
    assert data["tau"] == pytest.approx(-1.0)
    assert data["n"] == 3


def test_init_param_sets_include_finetuned_baseline(residual_graph, chain_graph, tiny_dataset):
    archs = [chain_graph, residual_graph]
    schedule = FinetuneSchedule(lrs=[0.1], steps=2, batch_size=16)
    inits = _init_param_sets({}, archs, 0, tiny_dataset, schedule)
    assert set(inits) == {"random", "sgd"}
    for g, random_p, sgd_p in zip(archs, inits["random"], inits["sgd"]):
        sgd_p.check(g)
        conv = next(n.id for n in g.nodes if n.op == OpKind.CONV2D)
        assert not torch.equal(random_p.tensors[conv], sgd_p.tensors[conv])
    assert set(_init_param_sets({}, archs, 0)) == {"random"}


def test_analyze_diversity_reports_sgd_baseline(tmp_path, config_file):
    config_file.write_text(TINY_CONFIG + "\n[finetune]\nlrs = [0.1]\nsteps = 2\nbatch_size = 16\n")
    model_path = tmp_path / "models" / "tiny.ghn"
    model_path.parent.mkdir()
    save_model(GhnModel(GhnConfig(layers=1, hidden=16, heads=4), seed=0), model_path)
    out = tmp_path / "div"
    assert run(["analyze", "--config", str(config_file), "--out", str(out), "--threads", "1",
                "--diversity", "--model", str(model_path)]) == 0

    result = json.loads((out / "diversity.json").read_text())
    assert set(result) == {"random", "sgd", "models_tiny"}
    for modes in result.values():
        assert set(modes) == {"direct", "hungarian"}
    rows = read_csv(out / "diversity.csv")
    assert {(r["init"], r["matching"]) for r in rows if r["init"] == "sgd"} == {
        ("sgd", "direct"), ("sgd", "hungarian"),
    }
