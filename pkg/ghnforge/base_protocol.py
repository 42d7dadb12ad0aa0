"""
Базовый класс для всех протоколов оценки
"""
import abc
import logging
import time
from typing import Generator, List, Optional

from .archgraph import ArchGraph
from .data import ImageDataset
from .ghn import GhnModel
from .models import EvalConfig, EvalReport, EvalRow

logger = logging.getLogger(__name__)


class BaseProtocol(abc.ABC):
    """Абстрактный протокол: обходит архитектуры и собирает строки отчёта"""

    key: str = ""

    def __init__(self, model: GhnModel, dataset: ImageDataset,
                 config: Optional[EvalConfig] = None, seed: int = 0):
        self.model = model
        self.dataset = dataset
        self.config = config or EvalConfig()
        self.seed = seed
        self.name = self.__class__.__name__

    @property
    @abc.abstractmethod
    def description(self) -> str:
        """Описание протокола"""

    @abc.abstractmethod
    def _evaluate_arch(self, g: ArchGraph,
                       report: EvalReport) -> Generator[EvalRow, None, None]:
        """Оценка одной архитектуры (генератор строк)"""

    def prepare(self, g: ArchGraph) -> ArchGraph:
        """Подгоняет классификатор под число классов набора"""
        if g.num_classes != self.dataset.num_classes:
            logger.debug(f"{g.name}: head resized {g.num_classes} -> {self.dataset.num_classes}")
            return g.with_num_classes(self.dataset.num_classes)
        return g

    def finalize(self, report: EvalReport) -> None:
        """Итоговые агрегаты протокола в report.extras"""

    def run(self, archs: List[ArchGraph]) -> EvalReport:
        """
        Основной метод: ошибка на одной архитектуре записывается
        в report.errors и не прерывает обход.
        """
        start_time = time.time()
        report = EvalReport(protocol=self.key or self.name, top_k=self.config.top_k)
        logger.info(f"Starting protocol {self.name} on {len(archs)} architectures")

        for g in archs:
            try:
                for row in self._evaluate_arch(self.prepare(g), report):
                    report.rows.append(row)
                    logger.debug(f"{row.arch} [{row.init}] acc={row.accuracy:.2f}")
            except Exception as e:
                error_msg = f"{self.name} failed on {g.name}: {type(e).__name__}: {e}"
                logger.error(error_msg, exc_info=True)
                report.errors.append(error_msg)

        self.finalize(report)
        report.duration = time.time() - start_time
        logger.info(f"Protocol {self.name} produced {len(report.rows)} rows, "
                    f"{len(report.errors)} errors")
        return report
