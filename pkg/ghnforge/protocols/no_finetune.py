"""
Точность предсказанных параметров без дообучения
"""
import logging
from typing import Generator, List, Optional

import torch

from ..archgraph import ArchGraph
from ..base_protocol import BaseProtocol
from ..data import ImageDataset
from ..ghn import GhnModel
from ..models import EvalConfig, EvalReport, EvalRow
from ..target_net import evaluate_accuracy, random_init

logger = logging.getLogger(__name__)


class NoFinetuneProtocol(BaseProtocol):
    """
    predict → прямой проход по валидации → top-1. BN нормализует по
    статистикам оценочного батча: скользящих статистик у предсказанных
    параметров нет.
    """

    key = "no_finetune"

    def __init__(self, model: GhnModel, dataset: ImageDataset,
                 config: Optional[EvalConfig] = None, seed: int = 0,
                 with_random: bool = False):
        super().__init__(model, dataset, config, seed)
        self.with_random = with_random

    @property
    def description(self) -> str:
        return "Top-1 accuracy of predicted parameters with zero gradient steps"

    def _evaluate_arch(self, g: ArchGraph,
                       report: EvalReport) -> Generator[EvalRow, None, None]:
        with torch.no_grad():
            p = self.model.predict_params(g)
        accuracy = evaluate_accuracy(g, p, self.dataset.val, self.config.batch_size,
                                     limit=self.config.max_val)
        yield EvalRow(arch=g.name, init="predicted", steps=0, accuracy=accuracy)
        if self.with_random:
            p = random_init(g, self.seed, self.model.dtype)
            accuracy = evaluate_accuracy(g, p, self.dataset.val, self.config.batch_size,
                                         limit=self.config.max_val)
            yield EvalRow(arch=g.name, init="random", steps=0, accuracy=accuracy)


def eval_no_finetune(model: GhnModel, archs: List[ArchGraph], dataset: ImageDataset,
                     config: Optional[EvalConfig] = None, seed: int = 0) -> EvalReport:
    return NoFinetuneProtocol(model, dataset, config, seed).run(archs)
