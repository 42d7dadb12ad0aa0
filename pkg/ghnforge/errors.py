"""
Иерархия исключений ghnforge
"""
from typing import Optional


class GhnForgeError(Exception):
    """Базовое исключение, несёт код выхода CLI"""
    exit_code: int = 1


class ConfigError(GhnForgeError):
    """Ошибка схемы конфигурации"""
    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class IoError(GhnForgeError):
    """Ошибка чтения/записи артефактов"""
    exit_code = 4


class NumericError(GhnForgeError):
    """Численный сбой во время вычислений"""
    exit_code = 3


class NonFiniteActivation(NumericError):
    """Неконечная активация на узле целевой сети"""

    def __init__(self, node_id: int, message: str = ""):
        self.node_id = node_id
        super().__init__(message or f"Non-finite activation at node {node_id}")


class NonFiniteLoss(NumericError):
    """Неконечная функция потерь для архитектуры"""

    def __init__(self, arch: str, message: str = ""):
        self.arch = arch
        super().__init__(message or f"Non-finite loss for architecture {arch}")


class DivergedError(NumericError):
    """Дообучение разошлось при заданном learning rate"""

    def __init__(self, lr: float, step: int):
        self.lr = lr
        self.step = step
        super().__init__(f"Fine-tuning diverged at step {step} with lr={lr}")


class GraphError(GhnForgeError):
    """Некорректный граф архитектуры"""
    exit_code = 3


class CycleError(GraphError):
    """Граф не является DAG"""


class ShapeMismatch(GraphError):
    """Несовместимые формы тензоров"""


class DanglingNode(GraphError):
    """Узел недостижим из входа или не достигает выхода"""


class UnsupportedShape(GraphError):
    """Форма параметра вне возможностей декодера"""


class GenerationExhausted(GraphError):
    """Генератор не смог выполнить ограничения за отведённые попытки"""


class DegenerateTensor(GhnForgeError):
    """Тензор с нулевой нормой"""
    exit_code = 3


class AllTied(GhnForgeError):
    """Ранговая корреляция не определена: все значения равны"""
    exit_code = 3
