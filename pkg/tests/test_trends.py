"""
Долгие эксперименты настольного масштаба; запуск: pytest -m slow
"""
import statistics
from pathlib import Path

import pytest

from ghnforge.ablation import ablation_sweep, summarize_cells
from ghnforge.arch_space import sample_space
from ghnforge.config import load_config
from ghnforge.data import ensure_dataset, load_dataset
from ghnforge.ghn import GhnModel
from ghnforge.protocols import compare_inits, eval_no_finetune
from ghnforge.trainer import train

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ORDER = ["full", "no_bw", "sa_only", "mlp_only"]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = load_config(CONFIGS / "desk_t.toml")
    cache = tmp_path_factory.mktemp("cache")
    dataset = load_dataset(ensure_dataset(cfg.data, cfg.data.seed, cache))
    space = [g.with_num_classes(dataset.num_classes) for g in sample_space(cfg.space)]
    holdout = sample_space(cfg.eval.holdout)
    return cfg, dataset, space, holdout


@pytest.fixture(scope="module")
def trained(desk):
    cfg, dataset, space, _ = desk
    model, _ = train(GhnModel(cfg.ghn, seed=cfg.seed), space, dataset, cfg.train)
    return model


@pytest.fixture(scope="module")
def ablation_rows(desk):
    cfg, dataset, space, holdout = desk
    return ablation_sweep(space, holdout, dataset, cfg.ghn, cfg.train, cfg.ablation, cfg.eval)


def test_predicted_params_beat_chance(desk, trained):
    cfg, dataset, _, holdout = desk
    report = eval_no_finetune(trained, holdout, dataset, cfg.eval, cfg.seed)
    assert report.errors == []
    mean, _ = report.aggregate("predicted")
    assert mean > 2 * 100.0 / dataset.num_classes


def test_predicted_init_wins_after_finetuning(desk, trained):
    cfg, dataset, _, holdout = desk
    report = compare_inits(holdout, trained, dataset, cfg.finetune, cfg.eval, cfg.seed)
    assert report.extras["comparison"]["win_rate"] > 0.5


def _ordered_up_to_one_inversion(means, stds) -> bool:
    inversions = [i for i in range(len(means) - 1) if means[i] < means[i + 1]]
    if len(inversions) > 1:
        return False
    return all(means[i + 1] - means[i] <= max(stds[i], stds[i + 1]) for i in inversions)


def test_ablation_ordering(ablation_rows):
    assert all(row.error is None for row in ablation_rows)
    summary = {row["cell"]: row for row in summarize_cells(ablation_rows)
               if row["reg_coef"] > 0}
    means = [summary[cell]["accuracy_mean"] for cell in ORDER]
    stds = [summary[cell]["accuracy_std"] for cell in ORDER]
    assert _ordered_up_to_one_inversion(means, stds), dict(zip(ORDER, means))


def test_regularization_shrinks_variance_and_magnitude(ablation_rows):
    full = [row for row in ablation_rows if row.cell == "full"]
    by_seed = {}
    for row in full:
        by_seed.setdefault(row.seed, {})[row.reg_coef > 0] = row
    wins = [
        pair[True].median_variance < pair[False].median_variance
        and pair[True].mean_abs_param < pair[False].mean_abs_param
        for pair in by_seed.values()
    ]
    assert statistics.mean(wins) > 0.5
