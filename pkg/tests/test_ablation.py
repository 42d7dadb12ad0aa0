import pytest

from ghnforge.ablation import ABLATION_CELLS, ablation_grid, ablation_sweep, summarize_cells
from ghnforge.errors import ConfigError
from ghnforge.models import AblationConfig, AblationRow, EvalConfig, GhnConfig, TrainConfig


def test_grid_enumerates_each_combination_once():
    cfg = AblationConfig(cells=["full", "no_bw", "full"], reg_coefs=[0.0, 3e-5],
                         weight_decays=[1e-2], seeds=[0, 1])
    grid = ablation_grid(cfg)
    assert len(grid) == 2 * 2 * 1 * 2
    assert len(set(grid)) == len(grid)
    assert grid[0] == ("full", 0.0, 1e-2, 0)


def test_unknown_cell():
    with pytest.raises(ConfigError):
        ablation_grid(AblationConfig(cells=["full", "no_decoder"]))


@pytest.mark.parametrize("cell", sorted(ABLATION_CELLS))
def test_cells_are_valid_configs(cell):
    cfg = GhnConfig(layers=1, hidden=16, heads=4).model_copy(update=ABLATION_CELLS[cell])
    GhnConfig.model_validate(cfg.model_dump())


def test_sweep_runs_cells(tmp_path, tiny_space, tiny_dataset):
    ablation = AblationConfig(cells=["full", "mlp_only"], seeds=[0], n_archs=4, epochs=1)
    train_cfg = TrainConfig(meta_batch=2, data_batch=16, log_every=1)
    rows = ablation_sweep(tiny_space, tiny_space[4:], tiny_dataset,
                          GhnConfig(layers=1, hidden=16, heads=4), train_cfg, ablation,
                          EvalConfig(batch_size=16), tmp_path)
    assert [r.cell for r in rows] == ["full", "mlp_only"]
    for row in rows:
        assert row.error is None
        assert 0.0 <= row.accuracy_mean <= 100.0
        assert row.median_variance is not None and row.median_variance >= 0
        assert row.mean_abs_param > 0
    assert (tmp_path / "full_g3e-05_wd0.01_s0" / "model.ghn").exists()


def test_summarize_cells():
    rows = [
        AblationRow(cell="full", reg_coef=0.0, weight_decay=0.0, seed=0, accuracy_mean=40.0),
        AblationRow(cell="full", reg_coef=0.0, weight_decay=0.0, seed=1, accuracy_mean=50.0),
        AblationRow(cell="no_bw", reg_coef=0.0, weight_decay=0.0, seed=0, error="boom"),
    ]
    summary = {row["cell"]: row for row in summarize_cells(rows)}
    assert summary["full"]["accuracy_mean"] == pytest.approx(45.0)
    assert summary["full"]["accuracy_std"] == pytest.approx(5.0)
    assert summary["no_bw"]["n_seeds"] == 0
    assert summary["no_bw"]["accuracy_mean"] is None
