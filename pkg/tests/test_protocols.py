import math
import statistics

import pytest

from ghnforge.arch_space import sample_space
from ghnforge.data import load_dataset, make_synthetic, save_dataset
from ghnforge.errors import ConfigError
from ghnforge.models import (
    ArchSpaceConfig, DataConfig, EvalConfig, EvalReport, EvalRow, FinetuneSchedule, TransferConfig,
)
from ghnforge.protocol_manager import ProtocolManager, discover_protocol_classes
from ghnforge.protocols import (
    CompareInitsProtocol, NoFinetuneProtocol, TransferProtocol, compare_inits, eval_no_finetune,
    summarize_pairs, transfer_eval,
)
from ghnforge.run_recorder import RunRecorder, read_csv


@pytest.fixture
def eval_cfg():
    return EvalConfig(batch_size=16, top_k=2)


def test_no_finetune_report(tiny_model, tiny_space, tiny_dataset, eval_cfg):
    report = eval_no_finetune(tiny_model, tiny_space, tiny_dataset, eval_cfg)
    assert report.errors == []
    assert [r.arch for r in report.rows] == [g.name for g in tiny_space]
    accs = [r.accuracy for r in report.rows]
    mean, std = report.aggregate("predicted")
    assert mean == pytest.approx(statistics.fmean(accs))
    assert std == pytest.approx(statistics.pstdev(accs))
    top = report.top("predicted")
    assert [r.accuracy for r in top] == sorted(accs, reverse=True)[:2]


def test_heads_are_resized_to_dataset(tiny_model, tiny_space, tiny_dataset, eval_cfg):
    archs = [g.with_num_classes(10) for g in tiny_space[:2]]
    report = eval_no_finetune(tiny_model, archs, tiny_dataset, eval_cfg)
    assert len(report.rows) == 2
    assert report.errors == []


def test_failure_on_one_arch_is_recorded(tiny_model, tiny_space, tiny_dataset, eval_cfg,
                                         monkeypatch):
    original = tiny_model.predict_params
    broken = tiny_space[1].name

    def flaky(g, feat=None):
        if g.name == broken:
            raise RuntimeError("boom")
        return original(g, feat)

    monkeypatch.setattr(tiny_model, "predict_params", flaky)
    report = eval_no_finetune(tiny_model, tiny_space, tiny_dataset, eval_cfg)
    assert len(report.errors) == 1
    assert broken in report.errors[0]
    assert len(report.rows) == len(tiny_space) - 1


def test_with_random_adds_second_arm(tiny_model, tiny_space, tiny_dataset, eval_cfg):
    report = NoFinetuneProtocol(tiny_model, tiny_dataset, eval_cfg, with_random=True).run(
        tiny_space[:2])
    assert sorted(report.summary()) == ["predicted", "random"]


def test_summarize_pairs():
    rows = [
        EvalRow(arch="a", init="predicted", accuracy=60),
        EvalRow(arch="a", init="random", accuracy=50),
        EvalRow(arch="b", init="predicted", accuracy=40),
        EvalRow(arch="b", init="random", accuracy=45),
        EvalRow(arch="c", init="predicted", accuracy=70),
    ]
    summary = summarize_pairs(EvalReport(protocol="compare", rows=rows))
    assert (summary.n_pairs, summary.wins) == (2, 1)
    assert summary.win_rate == 0.5
    assert summary.avg_gain == pytest.approx(2.5)
    empty = summarize_pairs(EvalReport(protocol="compare"))
    assert empty.n_pairs == 0 and math.isnan(empty.win_rate)


def test_compare_without_steps(tiny_model, tiny_space, tiny_dataset, eval_cfg):
    budget = FinetuneSchedule(steps=0, noise_beta=0.0)
    report = compare_inits(tiny_space[:2], tiny_model, tiny_dataset, budget, eval_cfg)
    assert len(report.rows) == 4
    assert all(r.steps == 0 for r in report.rows)
    assert report.extras["comparison"]["n_pairs"] == 2
    # без дообучения совпадает с оценкой без дообучения
    plain = eval_no_finetune(tiny_model, tiny_space[:2], tiny_dataset, eval_cfg)
    assert [r.accuracy for r in report.rows_for("predicted")] == [r.accuracy for r in plain.rows]


def test_compare_with_budget(tiny_model, tiny_space, tiny_dataset, eval_cfg):
    budget = FinetuneSchedule(lrs=[0.05, 0.01], steps=2, batch_size=16)
    report = compare_inits(tiny_space[:1], tiny_model, tiny_dataset, budget, eval_cfg)
    assert {r.init for r in report.rows} == {"predicted", "random"}
    assert all(r.steps == 2 and r.lr in (0.05, 0.01) for r in report.rows)
    logs = report.extras["lr_log"]
    assert len(logs) == 2
    assert all(len(entries) == 2 for entries in logs.values())


@pytest.fixture
def dst_dataset(tmp_path):
    cfg = DataConfig(name="dst", n_train=60, n_val=30, num_classes=3, image_size=8)
    save_dataset(tmp_path / "dst", cfg.name, cfg.num_classes, make_synthetic(cfg, seed=5))
    return load_dataset(tmp_path / "dst")


def test_transfer(tiny_model, tiny_space, tiny_dataset, dst_dataset, eval_cfg):
    transfer = TransferConfig(few_shot=20, budget=FinetuneSchedule(lrs=[0.05], steps=2,
                                                                  batch_size=8))
    report = transfer_eval(tiny_model, tiny_space[:2], tiny_dataset, dst_dataset, transfer,
                           eval_cfg, seed=3)
    assert report.errors == []
    assert len(report.rows) == 4
    ids = report.extras["few_shot_ids"]
    assert len(ids) == 20 and ids == sorted(ids)
    again = TransferProtocol(tiny_model, tiny_dataset, dst_dataset, transfer, eval_cfg, seed=3)
    assert again.subset.ids == ids


def test_transfer_with_source_finetune(tiny_model, tiny_space, tiny_dataset, dst_dataset,
                                       eval_cfg):
    transfer = TransferConfig(few_shot=20, src_finetune_steps=1,
                              budget=FinetuneSchedule(lrs=[0.05], steps=1, batch_size=8))
    protocol = TransferProtocol(tiny_model, tiny_dataset, dst_dataset, transfer, eval_cfg,
                                with_random=False)
    report = protocol.run(tiny_space[:1])
    assert report.errors == []
    assert [r.init for r in report.rows] == ["predicted"]


def test_manager_writes_reports(tmp_path, tiny_model, tiny_space, tiny_dataset, eval_cfg):
    manager = ProtocolManager(RunRecorder(tmp_path))
    manager.register_protocol_class(NoFinetuneProtocol, model=tiny_model, dataset=tiny_dataset,
                                    config=eval_cfg)
    manager.register_protocol(CompareInitsProtocol(tiny_model, tiny_dataset,
                                                   FinetuneSchedule(steps=0), eval_cfg))
    reports = manager.run(tiny_space[:2], ["no_finetune"])
    assert list(reports) == ["no_finetune"]
    assert (tmp_path / "no_finetune.json").exists()
    rows = read_csv(tmp_path / "no_finetune.csv")
    assert [r["arch"] for r in rows] == [g.name for g in tiny_space[:2]]
    info = manager.get_protocol_info()
    assert [p["key"] for p in info] == ["no_finetune", "compare"]


def test_discover_protocol_classes():
    found = discover_protocol_classes()
    assert {"no_finetune", "compare", "transfer"} <= set(found)
    assert found["transfer"] is TransferProtocol


@pytest.mark.parametrize("arms", [("random", "random"), ("predicted", "predicted")])
def test_identical_arms_are_self_consistent(tiny_model, tiny_dataset, eval_cfg, arms):
    archs = sample_space(ArchSpaceConfig(name="sc", n_archs=24, depth=(1, 2), channels=(4, 6),
                                         num_classes=4, rng_seed=3))
    budget = FinetuneSchedule(lrs=[0.05], steps=2, batch_size=16, noise_beta=0.05)
    report = compare_inits(archs, tiny_model, tiny_dataset, budget, eval_cfg, arms=arms)
    assert report.errors == []
    labels = [f"{arms[0]}_a", f"{arms[0]}_b"]
    assert sorted({r.init for r in report.rows}) == labels
    summary = report.extras["comparison"]
    assert summary["n_pairs"] == 24
    score = (summary["wins"] + summary["ties"] / 2) / summary["n_pairs"]
    assert 0.25 <= score <= 0.75
    # ветки с одинаковым источником различаются сидом
    a, b = (report.rows_for(label) for label in labels)
    assert [r.accuracy for r in a] != [r.accuracy for r in b]


def test_compare_arms_from_config(tiny_model, tiny_space, tiny_dataset):
    cfg = EvalConfig(batch_size=16, compare_arms=("random", "predicted"))
    protocol = CompareInitsProtocol(tiny_model, tiny_dataset, FinetuneSchedule(steps=0), cfg)
    assert protocol.labels == ["random", "predicted"]
    report = protocol.run(tiny_space[:2])
    assert [r.init for r in report.rows] == ["random", "predicted"] * 2
    with pytest.raises(ConfigError):
        CompareInitsProtocol(tiny_model, tiny_dataset, FinetuneSchedule(steps=0), cfg,
                             arms=("predicted", "loaded"))
