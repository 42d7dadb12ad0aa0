"""
Парное сравнение двух инициализаций при одинаковом бюджете дообучения:
по умолчанию предсказанная (+шум β) против случайной
"""
import logging
import math
import statistics
from typing import Dict, Generator, List, Optional, Sequence

import torch

from ..archgraph import ArchGraph
from ..base_protocol import BaseProtocol
from ..data import ImageDataset
from ..errors import ConfigError
from ..ghn import GhnModel
from ..models import ComparisonSummary, EvalConfig, EvalReport, EvalRow, FinetuneSchedule
from ..target_net import ParamSet, evaluate_accuracy, random_init, sgd_finetune
from ..trainer import add_symmetry_noise

logger = logging.getLogger(__name__)

PREDICTED = "predicted"
RANDOM = "random"


def summarize_pairs(report: EvalReport, a: str = PREDICTED, b: str = RANDOM) -> ComparisonSummary:
    """Доля побед a над b и средний выигрыш по архитектурам, где есть обе строки"""
    acc_a = {r.arch: r.accuracy for r in report.rows_for(a)}
    acc_b = {r.arch: r.accuracy for r in report.rows_for(b)}
    archs = sorted(set(acc_a) & set(acc_b))
    if not archs:
        return ComparisonSummary(n_pairs=0, wins=0, win_rate=math.nan, avg_gain=math.nan)
    gains = [acc_a[arch] - acc_b[arch] for arch in archs]
    wins = sum(1 for gain in gains if gain > 0)
    return ComparisonSummary(
        n_pairs=len(archs), wins=wins, win_rate=wins / len(archs),
        avg_gain=statistics.fmean(gains), ties=sum(1 for gain in gains if gain == 0),
    )


def arm_labels(arms: Sequence[str]) -> List[str]:
    """Метки веток: источник, а при одинаковых источниках источник с суффиксом _a/_b"""
    if len(set(arms)) == len(arms):
        return list(arms)
    return [f"{arm}_{suffix}" for arm, suffix in zip(arms, "ab")]


class FinetuneArmsMixin:
    """Дообучение одной ветки сравнения с записью перебора lr"""

    def finetune_arm(self, g: ArchGraph, p: ParamSet, init: str, dataset: ImageDataset,
                     schedule: FinetuneSchedule, report: EvalReport,
                     train_split=None) -> EvalRow:
        if schedule.total_steps(len(train_split or dataset.train)) == 0:
            accuracy = evaluate_accuracy(g, p, dataset.val, self.config.batch_size,
                                         limit=self.config.max_val)
            return EvalRow(arch=g.name, init=init, steps=0, accuracy=accuracy)
        result = sgd_finetune(g, p, dataset, schedule, seed=self.seed, train_split=train_split,
                              eval_batch_size=self.config.batch_size,
                              eval_limit=self.config.max_val)
        lr_log: Dict[str, List[dict]] = report.extras.setdefault("lr_log", {})
        lr_log[f"{g.name}/{init}"] = [row.model_dump() for row in result.log]
        return EvalRow(arch=g.name, init=init, steps=result.steps,
                       accuracy=result.best_accuracy, lr=result.best_lr)


class CompareInitsProtocol(FinetuneArmsMixin, BaseProtocol):
    """
    Две ветки инициализации при равном бюджете и переборе lr.
    По умолчанию predicted(+β) против RandInit; при одинаковых источниках
    ветки отличаются только сидом (проверка самосогласованности).
    """

    key = "compare"

    def __init__(self, model: GhnModel, dataset: ImageDataset, schedule: FinetuneSchedule,
                 config: Optional[EvalConfig] = None, seed: int = 0,
                 arms: Optional[Sequence[str]] = None):
        super().__init__(model, dataset, config, seed)
        self.schedule = schedule
        self.arms = tuple(arms or self.config.compare_arms)
        if len(self.arms) != 2 or not set(self.arms) <= {PREDICTED, RANDOM}:
            raise ConfigError(f"compare needs two arms from {PREDICTED}/{RANDOM}, got {self.arms}",
                              path="eval.compare_arms")
        self.labels = arm_labels(self.arms)

    @property
    def description(self) -> str:
        return (f"Fine-tuning from {self.labels[0]} vs {self.labels[1]} initialization "
                f"at equal budget")

    def _init_for(self, g: ArchGraph, arm: str, arm_seed: int) -> ParamSet:
        if arm == RANDOM:
            return random_init(g, arm_seed, self.model.dtype)
        with torch.no_grad():
            predicted = self.model.predict_params(g).detached()
        return add_symmetry_noise(predicted, self.schedule.noise_beta, arm_seed)

    def _evaluate_arch(self, g: ArchGraph,
                       report: EvalReport) -> Generator[EvalRow, None, None]:
        for i, (arm, label) in enumerate(zip(self.arms, self.labels)):
            p = self._init_for(g, arm, self.seed + i)
            yield self.finetune_arm(g, p, label, self.dataset, self.schedule, report)

    def finalize(self, report: EvalReport) -> None:
        summary = summarize_pairs(report, *self.labels)
        report.extras["comparison"] = summary.model_dump()
        logger.info(f"{self.labels[0]} wins {summary.wins}/{summary.n_pairs} over "
                    f"{self.labels[1]} (ties {summary.ties}, avg gain {summary.avg_gain:+.2f})")


def compare_inits(archs: List[ArchGraph], model: GhnModel, dataset: ImageDataset,
                  budget: FinetuneSchedule, config: Optional[EvalConfig] = None,
                  seed: int = 0, arms: Optional[Sequence[str]] = None) -> EvalReport:
    return CompareInitsProtocol(model, dataset, budget, config, seed, arms).run(archs)
