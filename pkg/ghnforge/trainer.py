"""
Обучение гиперсети: мета-батчи архитектур, CE + регуляризация предсказанных
параметров, шардирование градиентов, AdamW с косинусным расписанием, чекпоинты
"""
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple, Union

import humanize
import numpy as np
import torch
import torch.nn.functional as F

from .archgraph import ArchGraph
from .data import Batch, BatchStream, ImageDataset
from .errors import ConfigError, IoError, NonFiniteLoss, NumericError
from .ghn import GhnModel, save_model
from .models import RegForm, TrainConfig
from .run_recorder import MetricsWriter
from .schedules import cosine_lr_lambda
from .target_net import ParamSet, forward

logger = logging.getLogger(__name__)

MODEL_FILE = "model.ghn"
STATE_FILE = "run_state.pt"
METRICS_FILE = "metrics.csv"


@dataclass
class LossComponents:
    """Составляющие функции потерь одного шага (средние по мета-батчу)"""
    loss: float
    ce: float
    reg: float
    grad_norm: float = 0.0
    lr: float = 0.0
    per_arch: Dict[str, float] = field(default_factory=dict)


def reg_penalty(p: ParamSet, form: Union[RegForm, str] = RegForm.GROUP_L2) -> torch.Tensor:
    """group_l2: сумма L2-норм тензоров; squared: сумма квадратов; none: 0"""
    form = RegForm(form)
    tensors = [p.tensors[k] for k in sorted(p.tensors)]
    zero = tensors[0].new_zeros(()) if tensors else torch.zeros(())
    if form == RegForm.NONE or not tensors:
        return zero
    if form == RegForm.SQUARED:
        return sum((t.pow(2).sum() for t in tensors), zero)
    return sum((t.norm(p=2) for t in tensors), zero)


def add_symmetry_noise(p: ParamSet, beta: float,
                       gen: Optional[Union[torch.Generator, int]] = None) -> ParamSet:
    """p + beta * N(0, 1) поэлементно; beta=0 возвращает те же значения"""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if beta == 0:
        return ParamSet(dict(p.tensors), dict(p.sources))
    if gen is None or isinstance(gen, int):
        gen = torch.Generator().manual_seed(gen or 0)
    tensors = {}
    for k in sorted(p.tensors):
        t = p.tensors[k]
        noise = torch.randn(t.shape, generator=gen, dtype=t.dtype).to(t.device)
        tensors[k] = t + beta * noise
    return ParamSet(tensors, dict(p.sources))


def arch_loss(model: GhnModel, g: ArchGraph, batch: Batch,
              cfg: TrainConfig) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(CE + γ·reg, CE, reg) одной архитектуры с предсказанными параметрами"""
    try:
        p = model.predict_params(g)
        logits, _ = forward(g, p, batch)
        ce = F.cross_entropy(logits, batch.labels)
    except NumericError as e:
        raise NonFiniteLoss(g.name, f"Non-finite loss for architecture {g.name}: {e}") from e
    reg = reg_penalty(p, cfg.reg_form)
    loss = ce + cfg.reg_coef * reg
    if not torch.isfinite(loss):
        raise NonFiniteLoss(g.name)
    return loss, ce.detach(), reg.detach()


def split_shards(archs: Sequence[ArchGraph], shards: int) -> List[List[ArchGraph]]:
    """Непрерывные шарды почти равного размера, пустые отбрасываются"""
    bounds = np.linspace(0, len(archs), min(shards, len(archs)) + 1).round().astype(int)
    return [list(archs[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _arch_gradients(model: GhnModel, g: ArchGraph, batch: Batch, cfg: TrainConfig, m: int,
                    params: List[torch.nn.Parameter]):
    loss, ce, reg = arch_loss(model, g, batch, cfg)
    grads = torch.autograd.grad(loss / m, params, allow_unused=True)
    return grads, float(ce), float(reg), float(loss.detach())


def _shard_gradients(model: GhnModel, shard: List[ArchGraph], batch: Batch, cfg: TrainConfig,
                     m: int, params: List[torch.nn.Parameter], num_threads: int):
    # рабочий поток использует то же число intra-op потоков, что и вызывающий
    torch.set_num_threads(num_threads)
    return [_arch_gradients(model, g, batch, cfg, m, params) for g in shard]


def compute_gradients(model: GhnModel, archs: Sequence[ArchGraph], batch: Batch,
                      cfg: TrainConfig, threads: int = 1) -> LossComponents:
    """
    Градиенты средней по мета-батчу потери в .grad параметров модели.
    Градиент каждой архитектуры считается отдельно, шарды (при threads > 1
    параллельно) лишь распределяют работу. Сумма берётся в порядке archs,
    поэтому результат не зависит от числа шардов.
    """
    m = len(archs)
    params = [p for p in model.parameters() if p.requires_grad]
    shards = split_shards(archs, cfg.shards)
    num_threads = torch.get_num_threads()
    if threads > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(shards))) as pool:
            results = list(pool.map(
                lambda shard: _shard_gradients(model, shard, batch, cfg, m, params, num_threads),
                shards,
            ))
    else:
        results = [_shard_gradients(model, shard, batch, cfg, m, params, num_threads)
                   for shard in shards]
    per_graph = [item for shard_result in results for item in shard_result]

    for p in params:
        p.grad = None
    for grads, _, _, _ in per_graph:
        for p, grad in zip(params, grads):
            if grad is None:
                continue
            p.grad = grad.clone() if p.grad is None else p.grad + grad

    ce_mean = sum(ce for _, ce, _, _ in per_graph) / m
    reg_mean = sum(reg for _, _, reg, _ in per_graph) / m
    per_arch = {g.name: loss for g, (_, _, _, loss) in zip(archs, per_graph)}
    return LossComponents(
        loss=ce_mean + cfg.reg_coef * reg_mean, ce=ce_mean, reg=reg_mean, per_arch=per_arch
    )


def make_optimizer(model: GhnModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW: затухание весов применяется только к θ гиперсети"""
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999),
                             weight_decay=cfg.weight_decay)


def train_step(model: GhnModel, archs: Sequence[ArchGraph], batch: Batch, cfg: TrainConfig,
               optimizer: torch.optim.Optimizer,
               scheduler: Optional[torch.optim.lr_scheduler.LRScheduler] = None,
               threads: int = 1) -> LossComponents:
    """Один шаг оптимизатора по мета-батчу archs на общем батче данных"""
    if len(archs) != cfg.meta_batch:
        raise ConfigError(f"expected {cfg.meta_batch} architectures, got {len(archs)}",
                          path="train.meta_batch")
    lr = optimizer.param_groups[0]["lr"]
    optimizer.zero_grad(set_to_none=True)
    parts = compute_gradients(model, archs, batch, cfg, threads)
    max_norm = cfg.grad_clip if cfg.grad_clip is not None else float("inf")
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    parts.grad_norm = float(grad_norm)
    parts.lr = lr
    return parts


class Trainer:
    """Цикл обучения с сохраняемым состоянием запуска"""

    def __init__(self, model: GhnModel, space: List[ArchGraph], dataset: ImageDataset,
                 cfg: TrainConfig, out_dir: Optional[Path] = None, threads: int = 1):
        if cfg.meta_batch > len(space):
            raise ConfigError(
                f"meta_batch={cfg.meta_batch} exceeds the space size {len(space)}",
                path="train.meta_batch",
            )
        self.cfg = cfg
        self.seed = cfg.seed if cfg.seed is not None else 0
        self.dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        self.model = model.to(device=cfg.device, dtype=self.dtype)
        self.space = space
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir else None
        self.threads = threads

        # эпоха: одна перестановка пространства, хвост короче meta_batch отбрасывается
        self.steps_per_epoch = len(space) // cfg.meta_batch
        self.total_steps = cfg.max_steps or cfg.epochs * self.steps_per_epoch
        self.optimizer = make_optimizer(self.model, cfg)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, cosine_lr_lambda(self.total_steps)
        )
        self.arch_rng = np.random.default_rng(self.seed)
        self.stream = BatchStream(dataset.train, cfg.data_batch, self.seed + 1, augment=True)
        self.order: List[int] = []
        self.pos = 0
        self.step = 0
        self.metrics: Deque[Dict[str, Any]] = deque(maxlen=cfg.metrics_buffer)
        self.elapsed = 0.0
        self.writer = MetricsWriter(self.out_dir / METRICS_FILE) if self.out_dir else None

    def next_archs(self) -> List[ArchGraph]:
        """
        Мета-батч без возвращения в пределах эпохи. Когда в перестановке
        остаётся меньше meta_batch архитектур, они пропускаются и начинается
        новая перестановка (новая эпоха).
        """
        m = self.cfg.meta_batch
        if self.pos + m > len(self.order):
            self.order = self.arch_rng.permutation(len(self.space)).tolist()
            self.pos = 0
        index = self.order[self.pos:self.pos + m]
        self.pos += m
        return [self.space[i] for i in index]

    def train_step(self, archs: Sequence[ArchGraph], batch: Batch) -> LossComponents:
        return train_step(self.model, archs, batch, self.cfg, self.optimizer, self.scheduler,
                          self.threads)

    def run(self, until: Optional[int] = None) -> List[Dict[str, Any]]:
        """Обучает до total_steps (или до шага until); возвращает буфер метрик"""
        if self.writer is not None:
            self.writer.reset(keep_until_step=self.step - 1 if self.step else None)
        logger.info(
            f"Starting training: {len(self.space)} archs, {self.total_steps} steps, "
            f"meta_batch={self.cfg.meta_batch}, shards={self.cfg.shards}, from step {self.step}"
        )
        started = time.perf_counter() - self.elapsed
        stop = self.total_steps if until is None else min(until, self.total_steps)
        while self.step < stop:
            archs = self.next_archs()
            batch = next(self.stream).to(self.cfg.device, self.dtype)
            try:
                parts = self.train_step(archs, batch)
            except NonFiniteLoss as e:
                logger.error(f"Step {self.step}: {e}; resume from the last checkpoint",
                             exc_info=True)
                raise
            self.elapsed = time.perf_counter() - started
            row = {
                "step": self.step,
                "epoch": self.step // self.steps_per_epoch,
                "lr": parts.lr,
                "ce": parts.ce,
                "reg": parts.reg,
                "loss": parts.loss,
                "grad_norm": parts.grad_norm,
                "wallclock": round(self.elapsed, 3),
            }
            self.metrics.append(row)
            if self.writer is not None:
                self.writer.append(row)
            if self.step % self.cfg.log_every == 0 or self.step == self.total_steps - 1:
                logger.info(
                    f"step {self.step}/{self.total_steps} lr={parts.lr:.2e} ce={parts.ce:.4f} "
                    f"reg={parts.reg:.2f} grad_norm={parts.grad_norm:.3f} "
                    f"elapsed {humanize.naturaldelta(self.elapsed)}"
                )
            self.step += 1
            if self.out_dir and (self.step % self.cfg.checkpoint_every == 0
                                 or self.step == self.total_steps):
                self.save_checkpoint(self.out_dir)
        logger.info(f"Training completed in {humanize.naturaldelta(self.elapsed)}")
        return list(self.metrics)

    def state_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "arch_rng": self.arch_rng.bit_generator.state,
            "order": list(self.order),
            "pos": self.pos,
            "stream": self.stream.state_dict(),
            "metrics": list(self.metrics),
            "elapsed": self.elapsed,
            "config": self.cfg.model_dump(mode="json"),
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.step = int(state["step"])
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.arch_rng.bit_generator.state = state["arch_rng"]
        self.order = list(state["order"])
        self.pos = int(state["pos"])
        self.stream.load_state_dict(state["stream"])
        self.metrics = deque(state["metrics"], maxlen=self.cfg.metrics_buffer)
        self.elapsed = float(state["elapsed"])

    def save_checkpoint(self, out_dir: Path) -> Path:
        """model.ghn для предсказаний и run_state.pt для возобновления"""
        out_dir = Path(out_dir)
        save_model(self.model, out_dir / MODEL_FILE, {"step": self.step})
        path = out_dir / STATE_FILE
        try:
            torch.save(self.state_dict(), path)
        except OSError as e:
            raise IoError(f"Cannot write training state {path}: {e}") from e
        logger.debug(f"Checkpoint at step {self.step} written to {out_dir}")
        return path

    def load_checkpoint(self, ckpt_dir: Path) -> None:
        path = Path(ckpt_dir) / STATE_FILE
        try:
            state = torch.load(path, map_location=self.cfg.device, weights_only=False)
        except (OSError, RuntimeError) as e:
            raise IoError(f"Cannot read training state {path}: {e}") from e
        self.load_state_dict(state)
        logger.info(f"Resumed from {path} at step {self.step}")


def train(model: GhnModel, space: List[ArchGraph], dataset: ImageDataset, cfg: TrainConfig,
          out_dir: Optional[Path] = None, resume: Optional[Path] = None,
          threads: int = 1) -> Tuple[GhnModel, List[Dict[str, Any]]]:
    """Обучает модель; resume указывает каталог с run_state.pt"""
    trainer = Trainer(model, space, dataset, cfg, out_dir, threads)
    if resume is not None:
        trainer.load_checkpoint(resume)
    metrics = trainer.run()
    return trainer.model, metrics
