"""
Перенос: предсказание на исходной задаче, новая голова, дообучение на few-shot
подмножестве целевого набора
"""
import logging
from typing import Generator, List, Optional

import torch

from ..archgraph import ArchGraph
from ..base_protocol import BaseProtocol
from ..data import ImageDataset, few_shot_subset
from ..ghn import GhnModel
from ..models import EvalConfig, EvalReport, EvalRow, TransferConfig
from ..target_net import random_init, reinit_head, sgd_finetune
from ..trainer import add_symmetry_noise
from .compare import PREDICTED, RANDOM, FinetuneArmsMixin, summarize_pairs

logger = logging.getLogger(__name__)


class TransferProtocol(FinetuneArmsMixin, BaseProtocol):
    key = "transfer"

    def __init__(self, model: GhnModel, src: ImageDataset, dst: ImageDataset,
                 transfer: Optional[TransferConfig] = None, config: Optional[EvalConfig] = None,
                 seed: int = 0, with_random: bool = True):
        super().__init__(model, dst, config, seed)
        self.src = src
        self.transfer = transfer or TransferConfig()
        self.with_random = with_random
        self.subset = few_shot_subset(dst.train, self.transfer.few_shot, seed)

    @property
    def description(self) -> str:
        return "Head re-initialization and few-shot fine-tuning on another dataset"

    def prepare(self, g: ArchGraph) -> ArchGraph:
        if g.num_classes != self.src.num_classes:
            return g.with_num_classes(self.src.num_classes)
        return g

    def _evaluate_arch(self, g: ArchGraph,
                       report: EvalReport) -> Generator[EvalRow, None, None]:
        budget = self.transfer.budget
        with torch.no_grad():
            p = self.model.predict_params(g).detached()
        if self.transfer.src_finetune_steps > 0:
            src_schedule = budget.model_copy(update={
                "steps": self.transfer.src_finetune_steps, "lrs": [budget.lrs[0]],
            })
            p = sgd_finetune(g, p, self.src, src_schedule, seed=self.seed,
                             eval_batch_size=self.config.batch_size,
                             eval_limit=self.config.max_val).params

        g_dst = g.with_num_classes(self.dataset.num_classes)
        p = reinit_head(g, p, self.dataset.num_classes, self.seed)
        p = add_symmetry_noise(p, budget.noise_beta, self.seed)
        yield self.finetune_arm(g_dst, p, PREDICTED, self.dataset, budget, report,
                                train_split=self.subset)

        if self.with_random:
            random = random_init(g_dst, self.seed, self.model.dtype)
            yield self.finetune_arm(g_dst, random, RANDOM, self.dataset, budget, report,
                                    train_split=self.subset)

    def finalize(self, report: EvalReport) -> None:
        report.extras["few_shot_ids"] = list(self.subset.ids or [])
        if self.with_random:
            report.extras["comparison"] = summarize_pairs(report).model_dump()


def transfer_eval(model: GhnModel, archs: List[ArchGraph], src: ImageDataset, dst: ImageDataset,
                  transfer: Optional[TransferConfig] = None, config: Optional[EvalConfig] = None,
                  seed: int = 0) -> EvalReport:
    return TransferProtocol(model, src, dst, transfer, config, seed).run(archs)
