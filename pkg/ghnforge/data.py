"""
Наборы изображений: формат на диске, синтетический набор, батчи
"""
import hashlib
import json
import logging
import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from platformdirs import user_cache_dir

from .errors import ConfigError, IoError
from .models import DataConfig

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
SPLITS = ("train", "val")
CACHE_ENV = "GHNFORGE_CACHE_DIR"


@dataclass
class Batch:
    """Мини-батч изображений и меток"""
    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.images.shape[0] < 1 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"Batch needs B >= 1 matching images/labels, got "
                f"{tuple(self.images.shape)} and {tuple(self.labels.shape)}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def to(self, device: Any = None, dtype: Optional[torch.dtype] = None) -> "Batch":
        return Batch(self.images.to(device=device, dtype=dtype), self.labels.to(device))


@dataclass
class ImageSplit:
    """Нормализованные изображения одного сплита (только чтение)"""
    images: torch.Tensor
    labels: torch.Tensor
    ids: Optional[List[int]] = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: List[int]) -> "ImageSplit":
        index = torch.as_tensor(indices, dtype=torch.long)
        return ImageSplit(self.images[index], self.labels[index], list(indices))


@dataclass
class ImageDataset:
    name: str
    num_classes: int
    train: ImageSplit
    val: ImageSplit
    mean: List[float]
    std: List[float]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(out_dir: Path, name: str, num_classes: int,
                 arrays: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> Path:
    """Сохраняет uint8 NCHW изображения и метки с манифестом и контрольными суммами"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        train_images = arrays["train"][0].astype(np.float64) / 255.0
        mean = train_images.mean(axis=(0, 2, 3)).tolist()
        std = train_images.std(axis=(0, 2, 3)).clip(min=1e-3).tolist()
        splits = {}
        for split, (images, labels) in arrays.items():
            image_file = out_dir / f"{split}_images.npy"
            label_file = out_dir / f"{split}_labels.npy"
            np.save(image_file, images.astype(np.uint8))
            np.save(label_file, labels.astype(np.int64))
            splits[split] = {
                "n": int(len(labels)),
                "images": image_file.name,
                "labels": label_file.name,
                "images_sha256": _sha256(image_file),
                "labels_sha256": _sha256(label_file),
            }
        manifest = {
            "format_version": DATASET_FORMAT_VERSION,
            "name": name,
            "num_classes": num_classes,
            "mean": mean,
            "std": std,
            "splits": splits,
        }
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write dataset to {out_dir}: {e}") from e
    logger.info(f"Saved dataset {name} to {out_dir}")
    return path


def load_dataset(path: Path) -> ImageDataset:
    """Читает набор и проверяет контрольные суммы"""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        mean = torch.tensor(manifest["mean"], dtype=torch.float32).view(1, -1, 1, 1)
        std = torch.tensor(manifest["std"], dtype=torch.float32).view(1, -1, 1, 1)
        splits = {}
        for split in SPLITS:
            info = manifest["splits"][split]
            for key in ("images", "labels"):
                if _sha256(path / info[key]) != info[f"{key}_sha256"]:
                    raise IoError(f"Checksum mismatch for {path / info[key]}")
            images = torch.from_numpy(np.load(path / info["images"])).float().div_(255.0)
            labels = torch.from_numpy(np.load(path / info["labels"])).long()
            splits[split] = ImageSplit((images - mean) / std, labels)
    except (OSError, KeyError, ValueError) as e:
        raise IoError(f"Cannot read dataset from {path}: {e}") from e
    return ImageDataset(
        name=manifest["name"],
        num_classes=int(manifest["num_classes"]),
        train=splits["train"],
        val=splits["val"],
        mean=manifest["mean"],
        std=manifest["std"],
    )


def make_synthetic(cfg: DataConfig, seed: int) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """
    Синтетический набор в духе CIFAR: у каждого класса свой гладкий цветной
    шаблон, образцы получаются сдвигом шаблона с шумом и случайной яркостью.
    """
    gen = torch.Generator().manual_seed(seed)
    size = cfg.image_size
    coarse = torch.rand(cfg.num_classes, 3, 4, 4, generator=gen)
    templates = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)
    out = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        labels = torch.randint(0, cfg.num_classes, (n,), generator=gen)
        images = templates[labels].clone()
        shifts = torch.randint(-4, 5, (n, 2), generator=gen)
        for i in range(n):
            images[i] = torch.roll(images[i], shifts=(int(shifts[i, 0]), int(shifts[i, 1])),
                                   dims=(1, 2))
        brightness = 0.7 + 0.6 * torch.rand(n, 1, 1, 1, generator=gen)
        noise = 0.2 * torch.randn(n, 3, size, size, generator=gen)
        images = (images * brightness + noise).clamp(0.0, 1.0)
        out[split] = ((images * 255).round().to(torch.uint8).numpy(), labels.numpy())
    return out


def import_cifar10(src_dir: Path) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Читает стандартные python-батчи CIFAR-10"""
    src_dir = Path(src_dir)

    def read(files: List[str]) -> Tuple[np.ndarray, np.ndarray]:
        images, labels = [], []
        for file_name in files:
            with open(src_dir / file_name, "rb") as f:
                entry = pickle.load(f, encoding="latin1")
            images.append(np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            labels.append(np.asarray(entry["labels"], dtype=np.int64))
        return np.concatenate(images), np.concatenate(labels)

    try:
        return {
            "train": read([f"data_batch_{i}" for i in range(1, 6)]),
            "val": read(["test_batch"]),
        }
    except (OSError, KeyError, pickle.UnpicklingError) as e:
        raise IoError(f"Cannot import CIFAR-10 from {src_dir}: {e}") from e


def default_cache_dir() -> Path:
    """GHNFORGE_CACHE_DIR или пользовательский кеш платформы"""
    override = os.environ.get(CACHE_ENV)
    if override:
        return Path(override)
    return Path(user_cache_dir("ghnforge")) / "datasets"


def ensure_dataset(cfg: DataConfig, seed: int, cache_dir: Optional[Path] = None) -> Path:
    """Возвращает каталог набора, при необходимости создаёт его в кеше"""
    if cfg.source == "path":
        if cfg.path is None:
            raise ConfigError("data.path is required for source='path'", path="data.path")
        return Path(cfg.path)

    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
    if cfg.source == "cifar10":
        if cfg.cifar_src is None:
            raise ConfigError("data.cifar_src is required for source='cifar10'",
                              path="data.cifar_src")
        target = cache_dir / "cifar10"
        if not (target / "manifest.json").exists():
            save_dataset(target, "cifar10", 10, import_cifar10(cfg.cifar_src))
        return target

    target = cache_dir / (
        f"{cfg.name}-c{cfg.num_classes}-s{seed}-{cfg.n_train}x{cfg.n_val}-{cfg.image_size}px"
    )
    if not (target / "manifest.json").exists():
        logger.info(f"Generating synthetic dataset {cfg.name} in {target}")
        save_dataset(target, cfg.name, cfg.num_classes, make_synthetic(cfg, seed))
    return target


def augment(images: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Случайное горизонтальное отражение"""
    flip = torch.rand(images.shape[0], generator=gen) < 0.5
    if flip.any():
        images = images.clone()
        images[flip] = images[flip].flip(-1)
    return images


class BatchStream:
    """Бесконечный поток перемешанных батчей с сохраняемым состоянием"""

    def __init__(self, split: ImageSplit, batch_size: int, seed: int, augment: bool = True):
        self.split = split
        self.batch_size = min(batch_size, len(split))
        self.augment = augment
        self.gen = torch.Generator().manual_seed(seed)
        self.perm = torch.randperm(len(split), generator=self.gen)
        self.pos = 0
        self.epoch = 0

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        if self.pos + self.batch_size > len(self.split):
            self.perm = torch.randperm(len(self.split), generator=self.gen)
            self.pos = 0
            self.epoch += 1
        index = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        images = self.split.images[index]
        if self.augment:
            images = augment(images, self.gen)
        return Batch(images, self.split.labels[index])

    def state_dict(self) -> Dict[str, Any]:
        return {
            "gen": self.gen.get_state(),
            "perm": self.perm.clone(),
            "pos": self.pos,
            "epoch": self.epoch,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.gen.set_state(state["gen"])
        self.perm = state["perm"].clone()
        self.pos = int(state["pos"])
        self.epoch = int(state["epoch"])


def eval_batches(split: ImageSplit, batch_size: int,
                 limit: Optional[int] = None) -> Iterator[Batch]:
    """
    Последовательные батчи без аугментации. Хвост из одного образца
    присоединяется к предыдущему батчу.
    """
    n = len(split) if limit is None else min(limit, len(split))
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, start in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else n
        yield Batch(split.images[start:stop], split.labels[start:stop])


def few_shot_subset(split: ImageSplit, n: int, seed: int) -> ImageSplit:
    """Детерминированное подмножество из n образцов"""
    gen = torch.Generator().manual_seed(seed)
    n = min(n, len(split))
    ids = sorted(torch.randperm(len(split), generator=gen)[:n].tolist())
    return split.subset(ids)
