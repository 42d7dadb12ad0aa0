"""
Модели данных: перечисления, конфигурации и отчёты
"""
import math
import statistics
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Optional, List, Dict, Any, Tuple, Literal

import humanize
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_MAX_DIST = 16
DEFAULT_MAX_DEG = 16
DECODER_SPATIAL = 16


class OpKind(str, Enum):
    """Тип операции узла вычислительного графа"""
    CONV2D = "conv2d"
    LINEAR = "linear"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    SILU = "silu"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    GLOBAL_AVG_POOL = "global_avg_pool"
    ADD = "add"
    CONCAT = "concat"
    INPUT = "input"
    CLASSIFIER_HEAD = "classifier_head"

    @property
    def is_parametric(self) -> bool:
        return self in PARAMETRIC_OPS

    @property
    def index(self) -> int:
        """Индекс строки в таблице эмбеддингов операций"""
        return OP_ORDER.index(self)


OP_ORDER: List[OpKind] = list(OpKind)
PARAMETRIC_OPS = frozenset(
    {OpKind.CONV2D, OpKind.LINEAR, OpKind.BATCHNORM, OpKind.CLASSIFIER_HEAD}
)
ACTIVATION_OPS = frozenset({OpKind.RELU, OpKind.SILU})


class BnRole(str, Enum):
    """Роль узла batchnorm: масштаб или сдвиг"""
    SCALE = "scale"
    SHIFT = "shift"


class ParamSource(str, Enum):
    """Происхождение тензора параметров"""
    RANDOM_INIT = "random_init"
    PREDICTED = "predicted"
    LOADED = "loaded"


class BiasMode(str, Enum):
    """Режим смещения внимания"""
    GHN3 = "ghn3"              # fw + bw эмбеддинги через phi
    GRAPHORMER = "graphormer"  # только fw эмбеддинг
    NONE = "none"              # обычное self-attention


class RegForm(str, Enum):
    """Форма регуляризации предсказанных параметров"""
    GROUP_L2 = "group_l2"
    SQUARED = "squared"
    NONE = "none"


class MatchingMode(str, Enum):
    DIRECT = "direct"
    HUNGARIAN = "hungarian"


class StrictModel(BaseModel):
    """Базовая модель конфигурации: неизвестные ключи запрещены"""
    model_config = ConfigDict(extra="forbid")


def _check_range(value: Tuple[int, int], name: str) -> Tuple[int, int]:
    lo, hi = value
    if lo < 1 or hi < lo:
        raise ValueError(f"{name} range must satisfy 1 <= lo <= hi, got {value}")
    return value


class ArchSpaceConfig(StrictModel):
    """Конфигурация генератора пространства архитектур"""
    name: str = "train"
    n_archs: int = Field(100, ge=1)
    depth: Tuple[int, int] = (2, 6)  # число блоков
    channels: Tuple[int, int] = (8, 48)
    residual_p: float = Field(0.4, ge=0.0, le=1.0)
    concat_p: float = Field(0.15, ge=0.0, le=1.0)
    bn_p: float = Field(0.8, ge=0.0, le=1.0)
    downsample_p: float = Field(0.3, ge=0.0, le=1.0)
    hidden_linear_p: float = Field(0.3, ge=0.0, le=1.0)
    activations: List[OpKind] = Field(default_factory=lambda: [OpKind.RELU, OpKind.SILU])
    kernel_sizes: List[int] = Field(default_factory=lambda: [1, 3, 5])
    in_channels: int = Field(3, ge=1)
    num_classes: int = Field(10, ge=2)
    rng_seed: Optional[int] = None
    max_attempts_per_arch: int = Field(50, ge=1)

    @field_validator("depth")
    @classmethod
    def validate_depth(cls, v):
        return _check_range(v, "depth")

    @field_validator("channels")
    @classmethod
    def validate_channels(cls, v):
        return _check_range(v, "channels")

    @field_validator("activations")
    @classmethod
    def validate_activations(cls, v):
        if not v:
            raise ValueError("activation set must be non-empty")
        bad = [a for a in v if a not in ACTIVATION_OPS]
        if bad:
            raise ValueError(f"not an activation: {bad}")
        return v

    @field_validator("kernel_sizes")
    @classmethod
    def validate_kernels(cls, v):
        if not v:
            raise ValueError("kernel size set must be non-empty")
        for k in v:
            if k < 1 or k % 2 == 0 or k > DECODER_SPATIAL:
                raise ValueError(f"kernel sizes must be odd and in [1, {DECODER_SPATIAL}], got {k}")
        return v

    @classmethod
    def preset(cls, split: str, **overrides: Any) -> "ArchSpaceConfig":
        """Пресеты сплитов для проверки сдвига распределения архитектур"""
        base = cls(name=split, **overrides)
        lo_d, hi_d = base.depth
        lo_c, hi_c = base.channels
        if split in ("train", "test"):
            return base
        if split == "wide":
            return base.model_copy(update={"channels": (lo_c * 2, hi_c * 2)})
        if split == "deep":
            return base.model_copy(update={"depth": (lo_d * 2, hi_d * 2)})
        if split == "dense":
            return base.model_copy(update={
                "residual_p": min(1.0, base.residual_p + 0.4),
                "concat_p": min(1.0, base.concat_p + 0.3),
            })
        if split == "bn_free":
            return base.model_copy(update={"bn_p": 0.0})
        raise ValueError(f"Unknown split preset: {split}")


GHN_PRESETS: Dict[str, Tuple[int, int, int]] = {
    "T": (3, 64, 8),
    "S": (5, 128, 16),
    "L": (12, 256, 16),
    "XL": (24, 384, 16),
}


class GhnConfig(StrictModel):
    """Гиперпараметры графовой гиперсети"""
    layers: int = Field(3, ge=0)  # 0 допустимо только в тестах
    hidden: int = Field(64, ge=1)
    heads: int = Field(8, ge=1)
    max_dist: int = Field(DEFAULT_MAX_DIST, ge=1)
    max_deg: int = Field(DEFAULT_MAX_DEG, ge=1)
    use_sa: bool = True
    use_fw_edges: bool = True
    use_bw_edges: bool = True
    use_centrality: bool = True
    use_input_dist: bool = True
    per_layer_bias: bool = False
    phi_hidden: Optional[int] = None
    mlp_ratio: int = Field(4, ge=1)
    decoder_spatial: int = Field(DECODER_SPATIAL, ge=1)
    decoder_channel_mult: Literal[1, 2, 4] = 1
    decoder_hidden: Optional[int] = None
    supported_ops: List[OpKind] = Field(
        default_factory=lambda: sorted(PARAMETRIC_OPS, key=OP_ORDER.index)
    )

    @model_validator(mode="after")
    def validate_shape(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} must be divisible by heads={self.heads}")
        if self.use_bw_edges and not self.use_fw_edges:
            raise ValueError("use_bw_edges requires use_fw_edges")
        return self

    @property
    def bias_mode(self) -> BiasMode:
        if self.use_fw_edges and self.use_bw_edges:
            return BiasMode.GHN3
        if self.use_fw_edges:
            return BiasMode.GRAPHORMER
        return BiasMode.NONE

    @property
    def phi_width(self) -> int:
        return self.phi_hidden or 2 * self.heads

    @property
    def decoder_channels(self) -> int:
        return self.decoder_channel_mult * self.hidden

    @property
    def decoder_width(self) -> int:
        return self.decoder_hidden or 2 * self.hidden

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "GhnConfig":
        """Пресеты размеров T/S/L/XL"""
        try:
            layers, hidden, heads = GHN_PRESETS[name.upper()]
        except KeyError:
            raise ValueError(f"Unknown GHN preset: {name}") from None
        return cls(**{"layers": layers, "hidden": hidden, "heads": heads, **overrides})


class TrainConfig(StrictModel):
    """Конфигурация обучения гиперсети"""
    epochs: int = Field(30, ge=1)
    lr: float = Field(4e-4, gt=0)
    weight_decay: float = Field(1e-2, ge=0)
    reg_coef: float = Field(3e-5, ge=0)
    reg_form: RegForm = RegForm.GROUP_L2
    meta_batch: int = Field(4, ge=1)
    data_batch: int = Field(64, ge=1)
    shards: int = Field(1, ge=1)
    seed: Optional[int] = None
    grad_clip: Optional[float] = Field(5.0, gt=0)
    max_steps: Optional[int] = Field(None, ge=1)
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(100, ge=1)
    metrics_buffer: int = Field(1000, ge=1)
    dtype: Literal["float32", "float64"] = "float32"
    device: str = "cpu"
    dataset: str = "synthetic"
    arch_space: str = "train"


class DataConfig(StrictModel):
    """Источник набора изображений"""
    source: Literal["synthetic", "cifar10", "path"] = "synthetic"
    path: Optional[Path] = None
    cifar_src: Optional[Path] = None
    name: str = "synthetic10"
    n_train: int = Field(5000, ge=1)
    n_val: int = Field(1000, ge=1)
    num_classes: int = Field(10, ge=2)
    image_size: int = Field(32, ge=4)
    seed: Optional[int] = None


class FinetuneSchedule(StrictModel):
    """Протокол дообучения SGD с перебором learning rate"""
    lrs: List[float] = Field(default_factory=lambda: [0.4, 0.1, 0.04, 0.01, 0.001])
    steps: Optional[int] = Field(None, ge=0)
    epochs: float = Field(1.0, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(3e-5, ge=0)
    batch_size: int = Field(128, ge=1)
    noise_beta: float = Field(1e-5, ge=0)
    cosine: bool = True
    augment: bool = True
    seed: Optional[int] = None

    @field_validator("lrs")
    @classmethod
    def validate_lrs(cls, v):
        if not v or any(lr <= 0 for lr in v):
            raise ValueError("lr sweep must be a non-empty list of positive values")
        return v

    def total_steps(self, n_train: int) -> int:
        if self.steps is not None:
            return self.steps
        return int(math.ceil(self.epochs * n_train / self.batch_size))


InitArm = Literal["predicted", "random"]


class EvalConfig(StrictModel):
    """Параметры оценки на отложенных архитектурах"""
    holdout: ArchSpaceConfig = Field(
        default_factory=lambda: ArchSpaceConfig(name="test", n_archs=10, rng_seed=10_000)
    )
    batch_size: int = Field(256, ge=1)
    top_k: int = Field(10, ge=1)
    max_val: Optional[int] = Field(None, ge=1)
    # источники инициализации двух веток парного сравнения
    compare_arms: Tuple[InitArm, InitArm] = ("predicted", "random")


class TransferConfig(StrictModel):
    """Перенос на другой набор данных"""
    dst: DataConfig = Field(
        default_factory=lambda: DataConfig(name="synthetic5", num_classes=5, seed=77)
    )
    few_shot: int = Field(1000, ge=1)
    src_finetune_steps: int = Field(0, ge=0)
    budget: FinetuneSchedule = Field(default_factory=lambda: FinetuneSchedule(steps=200))


class AblationConfig(StrictModel):
    """Сетка абляций"""
    cells: List[str] = Field(default_factory=lambda: ["full", "no_bw", "sa_only", "mlp_only"])
    reg_coefs: List[float] = Field(default_factory=lambda: [3e-5])
    weight_decays: List[float] = Field(default_factory=lambda: [1e-2])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    n_archs: int = Field(40, ge=1)
    epochs: Optional[int] = Field(None, ge=1)


class SpaceStats(BaseModel):
    """Статистика пространства архитектур"""
    n_graphs: int
    mean_params: float
    mean_nodes: float
    mean_degree: float
    mean_path_length: float

    @property
    def human_params(self) -> str:
        return humanize.intword(int(self.mean_params))


class EvalRow(BaseModel):
    """Результат одной архитектуры при одной инициализации"""
    arch: str
    init: str
    steps: int = 0
    accuracy: float = Field(ge=0.0, le=100.0)
    lr: Optional[float] = None


def _mean_std(values: List[float]) -> Tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    return statistics.fmean(values), statistics.pstdev(values)


class EvalReport(BaseModel):
    """Отчёт протокола оценки"""
    protocol: str
    timestamp: datetime = Field(default_factory=datetime.now)
    rows: List[EvalRow] = Field(default_factory=list)
    errors: List[str] = Field(default_factory=list)
    top_k: int = 10
    top_k_rule: str = "top-k rows by accuracy, per init source"
    extras: Dict[str, Any] = Field(default_factory=dict)
    duration: float = 0.0

    def rows_for(self, init: Optional[str] = None) -> List[EvalRow]:
        return [r for r in self.rows if init is None or r.init == init]

    def aggregate(self, init: Optional[str] = None) -> Tuple[float, float]:
        """Среднее и стандартное отклонение точности"""
        return _mean_std([r.accuracy for r in self.rows_for(init)])

    def top(self, init: Optional[str] = None) -> List[EvalRow]:
        rows = sorted(self.rows_for(init), key=lambda r: (-r.accuracy, r.arch))
        return rows[: self.top_k]

    def top_aggregate(self, init: Optional[str] = None) -> Tuple[float, float]:
        return _mean_std([r.accuracy for r in self.top(init)])

    @property
    def human_duration(self) -> str:
        return humanize.naturaldelta(self.duration)

    def summary(self) -> Dict[str, Any]:
        """Агрегаты по каждому источнику инициализации"""
        out: Dict[str, Any] = {}
        for init in sorted({r.init for r in self.rows}):
            mean, std = self.aggregate(init)
            top_mean, top_std = self.top_aggregate(init)
            out[init] = {
                "n": len(self.rows_for(init)),
                "mean": mean, "std": std,
                "top_mean": top_mean, "top_std": top_std,
            }
        return out


class ComparisonSummary(BaseModel):
    """Сводка парного сравнения инициализаций"""
    n_pairs: int
    wins: int
    win_rate: float
    avg_gain: float
    ties: int = 0


class LrLogRow(BaseModel):
    """Результат дообучения при одном learning rate"""
    lr: float
    steps: int
    val_accuracy: Optional[float] = None
    final_loss: Optional[float] = None
    diverged: bool = False
    error: Optional[str] = None


class DiversityReport(BaseModel):
    """Разнообразие тензоров одной формы"""
    shape: List[int]
    matching: MatchingMode
    mean_distance: float
    n_tensors: int
    n_pairs: int
    n_skipped: int = 0

    @field_validator("mean_distance")
    @classmethod
    def validate_distance(cls, v):
        if not math.isnan(v) and not (-1e-6 <= v <= 1 + 1e-6):
            raise ValueError(f"distance out of [0, 1]: {v}")
        return v


class AblationRow(BaseModel):
    """Ячейка сетки абляций"""
    cell: str
    reg_coef: float
    weight_decay: float
    seed: int
    accuracy_mean: Optional[float] = None
    accuracy_std: Optional[float] = None
    median_variance: Optional[float] = None
    mean_abs_param: Optional[float] = None
    error: Optional[str] = None


class RunManifest(BaseModel):
    """Манифест запуска команды"""
    command: str
    config_hash: str
    git_hash: Optional[str] = None
    seed: int
    version: str
    argv: List[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=datetime.now)
    cpu_count: Optional[int] = None
    threads: Optional[int] = None
    artifacts: Dict[str, str] = Field(default_factory=dict)


class Provenance(BaseModel):
    """Происхождение предсказанных параметров"""
    model_hash: str
    graph_hash: str
    graph_name: str
    slots: Dict[int, ParamSource]
