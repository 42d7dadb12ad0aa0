"""
Анализ параметров: разнообразие тензоров, дисперсии активаций, ранговая корреляция
"""
import itertools
import logging
import math
import statistics
from collections import defaultdict
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.stats import kendalltau

from .archgraph import ArchGraph
from .data import Batch
from .errors import AllTied, DegenerateTensor
from .models import DiversityReport, MatchingMode
from .target_net import ActivationTrace, ParamSet, forward

logger = logging.getLogger(__name__)


def _as_array(t: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().double().numpy()
    return np.asarray(t, dtype=np.float64)


def _norms(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateTensor("Cannot compare a tensor with zero norm")
    return na * nb


def absolute_cosine_distance(a, b) -> float:
    """1 - |cos| между развёрнутыми тензорами"""
    a, b = _as_array(a).ravel(), _as_array(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch: {a.shape} vs {b.shape}")
    cos = float(a @ b) / _norms(a, b)
    return float(np.clip(1.0 - abs(cos), 0.0, 1.0))


def hungarian_distance(a, b) -> float:
    """
    Абсолютное косинусное расстояние после перестановки выходных каналов b.
    Ищутся назначения с максимальной и минимальной суммой скалярных
    произведений строк, берётся большее по модулю.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch: {a.shape} vs {b.shape}")
    rows_a = a.reshape(a.shape[0], -1)
    rows_b = b.reshape(b.shape[0], -1)
    denom = _norms(rows_a, rows_b)
    gram = rows_a @ rows_b.T
    best = 0.0
    for cost in (-gram, gram):
        row_ind, col_ind = linear_sum_assignment(cost)
        best = max(best, abs(float(gram[row_ind, col_ind].sum())))
    return float(np.clip(1.0 - best / denom, 0.0, 1.0))


def diversity(tensors: Sequence, matching: MatchingMode = MatchingMode.DIRECT) -> DiversityReport:
    """Среднее расстояние по всем неупорядоченным парам тензоров одной формы"""
    if len(tensors) < 2:
        raise ValueError(f"diversity needs at least 2 tensors, got {len(tensors)}")
    shape = tuple(tensors[0].shape)
    metric = hungarian_distance if MatchingMode(matching) == MatchingMode.HUNGARIAN \
        else absolute_cosine_distance
    distances: List[float] = []
    skipped = 0
    for a, b in itertools.combinations(tensors, 2):
        try:
            distances.append(metric(a, b))
        except DegenerateTensor:
            skipped += 1
    if skipped:
        logger.warning(f"Skipped {skipped} degenerate pairs for shape {shape}")
    return DiversityReport(
        shape=list(shape),
        matching=MatchingMode(matching),
        mean_distance=statistics.fmean(distances) if distances else math.nan,
        n_tensors=len(tensors),
        n_pairs=len(distances),
        n_skipped=skipped,
    )


def collect_by_shape(param_sets: Iterable[ParamSet]) -> Dict[Tuple[int, ...], List[torch.Tensor]]:
    groups: Dict[Tuple[int, ...], List[torch.Tensor]] = defaultdict(list)
    for p in param_sets:
        for k in sorted(p.tensors):
            groups[tuple(p.tensors[k].shape)].append(p.tensors[k].detach())
    return dict(groups)


def diversity_by_shape(param_sets: Iterable[ParamSet],
                       matching: MatchingMode = MatchingMode.DIRECT,
                       min_count: int = 2, max_per_shape: int = 50) -> List[DiversityReport]:
    """Отчёт по каждой форме, встретившейся не менее min_count раз"""
    reports = []
    for shape, tensors in sorted(collect_by_shape(param_sets).items()):
        if len(tensors) < min_count:
            continue
        reports.append(diversity(tensors[:max_per_shape], matching))
    return reports


def mean_distance(reports: Sequence[DiversityReport]) -> float:
    """Среднее по формам, взвешенное числом пар"""
    total = sum(r.n_pairs for r in reports if not math.isnan(r.mean_distance))
    if not total:
        return math.nan
    return sum(r.mean_distance * r.n_pairs for r in reports
               if not math.isnan(r.mean_distance)) / total


@torch.no_grad()
def variance_probe(g: ArchGraph, p: ParamSet, batch: Union[Batch, torch.Tensor]) -> ActivationTrace:
    """Дисперсии активаций после каждого conv/linear узла на одном батче"""
    _, trace = forward(g, p, batch, trace=True)
    return trace


def variance_series(g: ArchGraph, inits: Mapping[str, ParamSet],
                    batch: Union[Batch, torch.Tensor]) -> Dict[str, List[float]]:
    """Выровненные по слоям серии для нескольких инициализаций одной сети"""
    return {name: variance_probe(g, p, batch).values for name, p in inits.items()}


def median_variance(trace: ActivationTrace) -> float:
    return statistics.median(trace.values) if trace.values else math.nan


def mean_abs_param(p: ParamSet) -> float:
    flat = p.flat().detach()
    return float(flat.abs().mean()) if flat.numel() else math.nan


def kendall_tau(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """tau-b с поправкой на совпадения"""
    if len(scores_a) != len(scores_b):
        raise ValueError(f"Length mismatch: {len(scores_a)} vs {len(scores_b)}")
    if len(scores_a) < 2:
        raise ValueError("kendall_tau needs at least 2 items")
    if len(set(scores_a)) == 1 or len(set(scores_b)) == 1:
        raise AllTied("Kendall tau is undefined when all values of a list are tied")
    tau = kendalltau(scores_a, scores_b, variant="b").statistic
    if math.isnan(tau):
        raise AllTied("Kendall tau is undefined for these lists")
    return float(tau)
