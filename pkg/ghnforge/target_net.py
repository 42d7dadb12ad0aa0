"""
Исполняемая целевая сеть: функциональный прямой проход по графу с внешними параметрами
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from .archgraph import ArchGraph, ArchNode
from .checkpoint import read_records, write_records
from .data import Batch, BatchStream, ImageDataset, ImageSplit, eval_batches
from .errors import DivergedError, NonFiniteActivation, NumericError, ShapeMismatch
from .models import BnRole, FinetuneSchedule, LrLogRow, OpKind, ParamSource
from .schedules import cosine_lr_lambda

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
TRACED_OPS = frozenset({OpKind.CONV2D, OpKind.LINEAR})


@dataclass
class ParamSet:
    """Тензоры параметров по id параметрических узлов"""
    tensors: Dict[int, torch.Tensor]
    sources: Dict[int, ParamSource] = field(default_factory=dict)

    @property
    def source(self) -> ParamSource:
        """Источник, если он общий для всех слотов, иначе predicted"""
        kinds = set(self.sources.values())
        return kinds.pop() if len(kinds) == 1 else ParamSource.PREDICTED

    def detached(self) -> "ParamSet":
        return ParamSet({k: v.detach().clone() for k, v in self.tensors.items()},
                        dict(self.sources))

    def to(self, device=None, dtype: Optional[torch.dtype] = None) -> "ParamSet":
        return ParamSet({k: v.to(device=device, dtype=dtype) for k, v in self.tensors.items()},
                        dict(self.sources))

    def flat(self) -> torch.Tensor:
        return torch.cat([self.tensors[k].reshape(-1) for k in sorted(self.tensors)])

    def check(self, g: ArchGraph) -> None:
        """Проверяет ключи, формы и конечность тензоров"""
        expected = {n.id: n.shape for n in g.parametric_nodes}
        if set(self.tensors) != set(expected):
            raise ShapeMismatch(
                f"ParamSet keys {sorted(self.tensors)} do not match parametric nodes "
                f"{sorted(expected)} of {g.name}"
            )
        for node_id, shape in expected.items():
            if tuple(self.tensors[node_id].shape) != shape:
                raise ShapeMismatch(
                    f"{g.name}: node {node_id} expects {shape}, "
                    f"got {tuple(self.tensors[node_id].shape)}"
                )
        for node_id in sorted(expected):
            if not torch.isfinite(self.tensors[node_id]).all():
                raise NonFiniteActivation(
                    node_id, f"{g.name}: non-finite parameter at node {node_id}"
                )


@dataclass
class ActivationTrace:
    """Дисперсии активаций после conv/linear узлов"""
    variances: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def values(self) -> List[float]:
        return [v for _, v in self.variances]


class BnState:
    """Скользящие статистики batchnorm (используются только при дообучении)"""

    def __init__(self, g: ArchGraph, dtype: torch.dtype = torch.float32, device=None):
        self.running_mean: Dict[int, torch.Tensor] = {}
        self.running_var: Dict[int, torch.Tensor] = {}
        for node in g.parametric_nodes:
            if node.op == OpKind.BATCHNORM and node.attrs.bn_role == BnRole.SCALE:
                self.running_mean[node.id] = torch.zeros(node.shape, dtype=dtype, device=device)
                self.running_var[node.id] = torch.ones(node.shape, dtype=dtype, device=device)


def _apply_node(node: ArchNode, inputs: List[torch.Tensor], weight: Optional[torch.Tensor],
                bn_state: Optional[BnState], training: bool) -> torch.Tensor:
    op = node.op
    if op == OpKind.CONV2D:
        return F.conv2d(inputs[0], weight, stride=node.attrs.stride,
                        padding=(node.attrs.kernel - 1) // 2)
    if op in (OpKind.LINEAR, OpKind.CLASSIFIER_HEAD):
        return F.linear(inputs[0], weight)
    if op == OpKind.BATCHNORM:
        x = inputs[0]
        if node.attrs.bn_role == BnRole.SHIFT:
            view = (1, -1) + (1,) * (x.dim() - 2)
            return x + weight.view(view)
        if bn_state is None:
            return F.batch_norm(x, None, None, weight=weight, training=True, eps=BN_EPS)
        return F.batch_norm(
            x, bn_state.running_mean[node.id], bn_state.running_var[node.id],
            weight=weight, training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
        )
    if op == OpKind.RELU:
        return F.relu(inputs[0])
    if op == OpKind.SILU:
        return F.silu(inputs[0])
    if op == OpKind.MAXPOOL:
        return F.max_pool2d(inputs[0], node.attrs.kernel, node.attrs.stride,
                            padding=(node.attrs.kernel - 1) // 2)
    if op == OpKind.AVGPOOL:
        return F.avg_pool2d(inputs[0], node.attrs.kernel, node.attrs.stride,
                            padding=(node.attrs.kernel - 1) // 2, count_include_pad=False)
    if op == OpKind.GLOBAL_AVG_POOL:
        return inputs[0].mean(dim=(2, 3))
    if op == OpKind.ADD:
        out = inputs[0]
        for other in inputs[1:]:
            out = out + other
        return out
    if op == OpKind.CONCAT:
        return torch.cat(inputs, dim=1)
    raise ShapeMismatch(f"Operation {op.value} cannot be executed at node {node.id}")


def forward(g: ArchGraph, p: ParamSet, x: Union[Batch, torch.Tensor], trace: bool = False,
            bn_state: Optional[BnState] = None,
            training: bool = True) -> Tuple[torch.Tensor, Optional[ActivationTrace]]:
    """
    Прямой проход целевой сети. BN использует статистики батча,
    если не передано bn_state с training=False.
    """
    p.check(g)
    images = x.images if isinstance(x, Batch) else x
    acts: List[Optional[torch.Tensor]] = [None] * g.num_nodes
    recorded = ActivationTrace() if trace else None

    for node in g.nodes:
        if node.op == OpKind.INPUT:
            if images.shape[1] != node.attrs.channels:
                raise ShapeMismatch(
                    f"{g.name}: input has {images.shape[1]} channels, "
                    f"graph expects {node.attrs.channels}"
                )
            out = images
        else:
            inputs = [acts[j] for j in g.predecessors(node.id)]
            try:
                out = _apply_node(node, inputs, p.tensors.get(node.id), bn_state, training)
            except (RuntimeError, ValueError) as e:
                raise ShapeMismatch(f"{g.name}: node {node.id} ({node.op.value}): {e}") from e
        if not torch.isfinite(out).all():
            raise NonFiniteActivation(node.id, f"{g.name}: non-finite activation at node {node.id}")
        if recorded is not None and node.op in TRACED_OPS:
            recorded.variances.append((node.id, float(out.detach().var(unbiased=False))))
        acts[node.id] = out

    return acts[g.head.id], recorded


def cross_entropy(g: ArchGraph, p: ParamSet, batch: Batch) -> torch.Tensor:
    logits, _ = forward(g, p, batch)
    return F.cross_entropy(logits, batch.labels)


def loss_and_grads(g: ArchGraph, p: ParamSet,
                   batch: Batch) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
    """Кросс-энтропия и её градиенты по всем тензорам p"""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in p.tensors.items()}
    loss = cross_entropy(g, ParamSet(leaves, dict(p.sources)), batch)
    keys = sorted(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in keys])
    return loss.detach(), dict(zip(keys, grads))


def _he_normal(shape: Tuple[int, ...], gen: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    fan_in = int(math.prod(shape[1:]))
    return torch.randn(shape, generator=gen, dtype=dtype) * math.sqrt(2.0 / fan_in)


def init_node(node: ArchNode, gen: torch.Generator,
              dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Стандартная инициализация одного слота"""
    if node.op == OpKind.BATCHNORM:
        if node.attrs.bn_role == BnRole.SHIFT:
            return torch.zeros(node.shape, dtype=dtype)
        return torch.ones(node.shape, dtype=dtype)
    return _he_normal(node.shape, gen, dtype)


def random_init(g: ArchGraph, gen: Union[torch.Generator, int],
                dtype: torch.dtype = torch.float32) -> ParamSet:
    """He-инициализация conv/linear, BN: масштаб 1, сдвиг 0"""
    if isinstance(gen, int):
        gen = torch.Generator().manual_seed(gen)
    tensors = {node.id: init_node(node, gen, dtype) for node in g.parametric_nodes}
    return ParamSet(tensors, {k: ParamSource.RANDOM_INIT for k in tensors})


def reinit_head(g: ArchGraph, p: ParamSet, new_num_classes: int,
                gen: Union[torch.Generator, int]) -> ParamSet:
    """Заменяет только тензор классификатора, остальные остаются теми же объектами"""
    if isinstance(gen, int):
        gen = torch.Generator().manual_seed(gen)
    head = g.head
    old = p.tensors[head.id]
    tensors = dict(p.tensors)
    tensors[head.id] = _he_normal((new_num_classes, head.shape[1]), gen, old.dtype).to(old.device)
    sources = dict(p.sources)
    sources[head.id] = ParamSource.RANDOM_INIT
    return ParamSet(tensors, sources)


@torch.no_grad()
def evaluate_accuracy(g: ArchGraph, p: ParamSet, split: ImageSplit, batch_size: int = 256,
                      bn_state: Optional[BnState] = None, limit: Optional[int] = None) -> float:
    """Top-1 точность в процентах"""
    correct = 0
    total = 0
    dtype = next(iter(p.tensors.values())).dtype
    for batch in eval_batches(split, batch_size, limit):
        logits, _ = forward(g, p, batch.images.to(dtype), bn_state=bn_state,
                            training=bn_state is None)
        correct += int((logits.argmax(dim=1) == batch.labels).sum())
        total += len(batch)
    return 100.0 * correct / max(total, 1)


def make_sgd(params, lr: float, momentum: float, weight_decay: float) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


@dataclass
class FinetuneResult:
    params: ParamSet
    best_lr: Optional[float]
    best_accuracy: float
    steps: int
    log: List[LrLogRow]
    bn_state: Optional[BnState] = None


def _finetune_one(g: ArchGraph, p: ParamSet, dataset: ImageDataset, schedule: FinetuneSchedule,
                  lr: float, steps: int, seed: int,
                  train_split: Optional[ImageSplit]) -> Tuple[ParamSet, Optional[BnState], float]:
    dtype = next(iter(p.tensors.values())).dtype
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in p.tensors.items()}
    optimizer = make_sgd(list(leaves.values()), lr, schedule.momentum, schedule.weight_decay)
    scheduler = None
    if schedule.cosine:
        scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, cosine_lr_lambda(steps))
    params = ParamSet(leaves, dict(p.sources))
    bn_state = BnState(g, dtype=dtype) if steps > 0 else None
    stream = BatchStream(train_split or dataset.train, schedule.batch_size, seed,
                         augment=schedule.augment)
    loss_value = float("nan")
    for step in range(steps):
        batch = next(stream).to(dtype=dtype)
        try:
            logits, _ = forward(g, params, batch, bn_state=bn_state)
        except NonFiniteActivation as e:
            raise DivergedError(lr, step) from e
        loss = F.cross_entropy(logits, batch.labels)
        if not torch.isfinite(loss):
            raise DivergedError(lr, step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        loss_value = float(loss)
    return params.detached(), bn_state, loss_value


def sgd_finetune(g: ArchGraph, p: ParamSet, dataset: ImageDataset, schedule: FinetuneSchedule,
                 seed: int = 0, train_split: Optional[ImageSplit] = None,
                 eval_batch_size: int = 256, eval_limit: Optional[int] = None) -> FinetuneResult:
    """
    Дообучение SGD для каждого lr из перебора; возвращается лучший по
    точности на валидации. Расхождение при одном lr не прерывает перебор.
    """
    split = train_split or dataset.train
    steps = schedule.total_steps(len(split))
    log: List[LrLogRow] = []
    best: Optional[FinetuneResult] = None

    for lr in schedule.lrs:
        try:
            params, bn_state, loss_value = _finetune_one(
                g, p, dataset, schedule, lr, steps, seed, train_split
            )
            try:
                accuracy = evaluate_accuracy(g, params, dataset.val, eval_batch_size,
                                             bn_state=bn_state, limit=eval_limit)
            except NumericError as e:
                raise DivergedError(lr, steps) from e
        except DivergedError as e:
            logger.warning(f"{g.name}: {e}")
            log.append(LrLogRow(lr=lr, steps=steps, diverged=True, error=str(e)))
            continue
        log.append(LrLogRow(lr=lr, steps=steps, val_accuracy=accuracy, final_loss=loss_value))
        logger.debug(f"{g.name}: lr={lr} steps={steps} acc={accuracy:.2f}")
        if best is None or accuracy > best.best_accuracy:
            best = FinetuneResult(params, lr, accuracy, steps, log, bn_state)

    if best is None:
        raise DivergedError(schedule.lrs[-1], steps)
    best.log = log
    return best


def save_params(p: ParamSet, path: Path, meta: Optional[dict] = None) -> None:
    """Записывает ParamSet: (id узла, форма, float32) по возрастанию id"""
    records = [(str(k), p.tensors[k].detach().cpu().float().numpy()) for k in sorted(p.tensors)]
    header = dict(meta or {})
    header["sources"] = {str(k): p.sources.get(k, ParamSource.LOADED).value
                         for k in sorted(p.tensors)}
    write_records(path, "paramset", records, header)


def load_params(path: Path) -> Tuple[ParamSet, dict]:
    meta, records = read_records(path, "paramset")
    tensors = {int(name): torch.from_numpy(array) for name, array in records}
    sources = {int(k): ParamSource(v) for k, v in meta.get("sources", {}).items()}
    return ParamSet(tensors, sources), meta
