import math
from typing import Callable


def cosine_factor(step: int, total_steps: int) -> float:
    """Множитель косинусного расписания: 1 на шаге 0, 0 на последнем шаге"""
    if total_steps <= 1:
        return 1.0
    if step >= total_steps - 1:
        return 0.0
    decay_ratio = step / (total_steps - 1)
    return 0.5 * (1.0 + math.cos(math.pi * decay_ratio))


def cosine_lr_lambda(total_steps: int) -> Callable[[int], float]:
    """Функция для torch.optim.lr_scheduler.LambdaLR"""
    return lambda step: cosine_factor(step, total_steps)
