"""
Конфигурация эксперимента: TOML/YAML → проверенная модель pydantic
"""
import hashlib
import json
import logging
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import Field, ValidationError, model_validator

from .errors import ConfigError, IoError
from .models import (
    AblationConfig, ArchSpaceConfig, DataConfig, EvalConfig, FinetuneSchedule, GhnConfig,
    StrictModel, TrainConfig, TransferConfig,
)

logger = logging.getLogger(__name__)

SEED_ENV = "GHNFORGE_SEED"
HOLDOUT_SEED_OFFSET = 10_000


class ExperimentConfig(StrictModel):
    """Один файл описывает один эксперимент"""
    name: str = "experiment"
    seed: int = 0
    ghn_preset: Optional[str] = None
    space: ArchSpaceConfig = Field(default_factory=ArchSpaceConfig)
    ghn: GhnConfig = Field(default_factory=GhnConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    finetune: FinetuneSchedule = Field(default_factory=FinetuneSchedule)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    transfer: TransferConfig = Field(default_factory=TransferConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="before")
    @classmethod
    def apply_ghn_preset(cls, data: Any) -> Any:
        """Ключи из [ghn] перекрывают значения пресета"""
        if isinstance(data, dict) and data.get("ghn_preset"):
            preset = GhnConfig.preset(data["ghn_preset"])
            merged = preset.model_dump(include={"layers", "hidden", "heads"})
            merged.update(data.get("ghn") or {})
            data = {**data, "ghn": merged}
        return data

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": seed})

    def resolved(self) -> "ExperimentConfig":
        """Незаданные сиды секций выводятся из общего сида"""
        s = self.seed
        holdout = self.eval.holdout
        if holdout.rng_seed is None:
            holdout = holdout.model_copy(update={"rng_seed": s + HOLDOUT_SEED_OFFSET})
        return self.model_copy(update={
            "space": self.space if self.space.rng_seed is not None
            else self.space.model_copy(update={"rng_seed": s}),
            "train": self.train if self.train.seed is not None
            else self.train.model_copy(update={"seed": s}),
            "data": self.data if self.data.seed is not None
            else self.data.model_copy(update={"seed": s}),
            "finetune": self.finetune if self.finetune.seed is not None
            else self.finetune.model_copy(update={"seed": s}),
            "eval": self.eval.model_copy(update={"holdout": holdout}),
        })


def _error_path(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error["loc"])


def parse_config(data: Dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as e:
        first = e.errors()[0]
        path = _error_path(first)
        raise ConfigError(f"{first['msg']} (in {source})", path=path or None) from e
    except ValueError as e:
        raise ConfigError(f"{e} (in {source})") from e


def read_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot read config {path}: {e}") from e
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            return tomllib.loads(text)
        if suffix in (".yaml", ".yml"):
            return yaml.safe_load(text) or {}
    except (tomllib.TOMLDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    raise ConfigError(f"Unsupported config format {suffix!r}, use .toml or .yaml", path=str(path))


def seed_override() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"must be an integer, got {raw!r}", path=SEED_ENV) from None


def load_config(path: Optional[Path] = None) -> ExperimentConfig:
    """Читает файл (или берёт значения по умолчанию), применяет GHNFORGE_SEED"""
    data = read_config_file(path) if path else {}
    cfg = parse_config(data, str(path) if path else "<defaults>")
    seed = seed_override()
    if seed is not None:
        logger.info(f"Seed overridden by {SEED_ENV}={seed}")
        cfg = cfg.with_seed(seed)
    return cfg.resolved()


def config_hash(cfg: StrictModel) -> str:
    """sha256 канонического JSON проверенной конфигурации"""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
