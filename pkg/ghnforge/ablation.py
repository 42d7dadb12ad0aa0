"""
Сетка абляций: флаги гиперсети × γ × λ × сиды
"""
import itertools
import logging
import statistics
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import torch

from .analysis import mean_abs_param, median_variance, variance_probe
from .archgraph import ArchGraph
from .data import ImageDataset
from .errors import ConfigError
from .ghn import GhnModel
from .models import AblationConfig, AblationRow, EvalConfig, GhnConfig, TrainConfig
from .protocols.no_finetune import eval_no_finetune
from .trainer import train

logger = logging.getLogger(__name__)

ABLATION_CELLS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "no_bw": {"use_bw_edges": False},
    "sa_only": {"use_fw_edges": False, "use_bw_edges": False},
    "mlp_only": {"use_sa": False, "use_fw_edges": False, "use_bw_edges": False},
    "no_centrality": {"use_centrality": False},
    "no_input_dist": {"use_input_dist": False},
}


def ablation_grid(cfg: AblationConfig) -> List[Tuple[str, float, float, int]]:
    """Каждая комбинация (ячейка, γ, λ, сид) ровно один раз"""
    unknown = [c for c in cfg.cells if c not in ABLATION_CELLS]
    if unknown:
        raise ConfigError(f"unknown ablation cells {unknown}", path="ablation.cells")
    cells = list(dict.fromkeys(cfg.cells))
    return list(itertools.product(
        cells, dict.fromkeys(cfg.reg_coefs), dict.fromkeys(cfg.weight_decays),
        dict.fromkeys(cfg.seeds),
    ))


def run_cell(cell: str, reg_coef: float, weight_decay: float, seed: int,
             space: List[ArchGraph], holdout: List[ArchGraph], dataset: ImageDataset,
             ghn_cfg: GhnConfig, train_cfg: TrainConfig, eval_cfg: EvalConfig,
             epochs: Optional[int] = None, out_dir: Optional[Path] = None,
             threads: int = 1) -> AblationRow:
    """Обучает одну гиперсеть и измеряет точность, дисперсии и |w_pred|"""
    model = GhnModel(ghn_cfg.model_copy(update=ABLATION_CELLS[cell]), seed=seed)
    update: Dict[str, Any] = {"reg_coef": reg_coef, "weight_decay": weight_decay, "seed": seed}
    if epochs is not None:
        update["epochs"] = epochs
    model, _ = train(model, space, dataset, train_cfg.model_copy(update=update), out_dir,
                     threads=threads)

    report = eval_no_finetune(model, holdout, dataset, eval_cfg, seed)
    mean, std = report.aggregate("predicted")
    batch = dataset.val.images[: eval_cfg.batch_size].to(model.dtype)
    variances, magnitudes = [], []
    with torch.no_grad():
        for g in holdout:
            g = g.with_num_classes(dataset.num_classes)
            try:
                p = model.predict_params(g)
                variances.append(median_variance(variance_probe(g, p, batch)))
                magnitudes.append(mean_abs_param(p))
            except Exception as e:
                logger.warning(f"{cell}: probe failed on {g.name}: {e}")
    return AblationRow(
        cell=cell, reg_coef=reg_coef, weight_decay=weight_decay, seed=seed,
        accuracy_mean=mean, accuracy_std=std,
        median_variance=statistics.median(variances) if variances else None,
        mean_abs_param=statistics.fmean(magnitudes) if magnitudes else None,
    )


def ablation_sweep(space: List[ArchGraph], holdout: List[ArchGraph], dataset: ImageDataset,
                   ghn_cfg: GhnConfig, train_cfg: TrainConfig, ablation: AblationConfig,
                   eval_cfg: Optional[EvalConfig] = None, out_dir: Optional[Path] = None,
                   threads: int = 1) -> List[AblationRow]:
    """Одна маленькая гиперсеть на ячейку; сбой ячейки записывается в строку"""
    eval_cfg = eval_cfg or EvalConfig()
    space = space[: ablation.n_archs]
    grid = ablation_grid(ablation)
    logger.info(f"Starting ablation sweep: {len(grid)} cells on {len(space)} archs")
    rows: List[AblationRow] = []
    for cell, reg_coef, weight_decay, seed in grid:
        cell_dir = None
        if out_dir is not None:
            cell_dir = Path(out_dir) / f"{cell}_g{reg_coef:g}_wd{weight_decay:g}_s{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
        try:
            row = run_cell(cell, reg_coef, weight_decay, seed, space, holdout, dataset,
                           ghn_cfg, train_cfg, eval_cfg, ablation.epochs, cell_dir, threads)
        except Exception as e:
            logger.error(f"Ablation cell {cell} (γ={reg_coef}, λ={weight_decay}, seed={seed}) "
                         f"failed: {e}", exc_info=True)
            row = AblationRow(cell=cell, reg_coef=reg_coef, weight_decay=weight_decay,
                              seed=seed, error=f"{type(e).__name__}: {e}")
        rows.append(row)
        logger.info(f"Cell {cell} γ={reg_coef} λ={weight_decay} seed={seed}: "
                    f"acc={row.accuracy_mean}")
    return rows


def summarize_cells(rows: List[AblationRow]) -> List[Dict[str, Any]]:
    """Среднее и std по сидам для каждой (ячейка, γ, λ)"""
    groups: Dict[Tuple[str, float, float], List[AblationRow]] = {}
    for row in rows:
        groups.setdefault((row.cell, row.reg_coef, row.weight_decay), []).append(row)
    out = []
    for (cell, reg_coef, weight_decay), members in groups.items():
        accs = [r.accuracy_mean for r in members if r.accuracy_mean is not None]
        variances = [r.median_variance for r in members if r.median_variance is not None]
        out.append({
            "cell": cell,
            "reg_coef": reg_coef,
            "weight_decay": weight_decay,
            "n_seeds": len(accs),
            "accuracy_mean": statistics.fmean(accs) if accs else None,
            "accuracy_std": statistics.pstdev(accs) if accs else None,
            "median_variance": statistics.median(variances) if variances else None,
        })
    return out
