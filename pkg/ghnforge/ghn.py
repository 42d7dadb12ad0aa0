"""
Графовая гиперсеть: энкодер + декодер, предсказание параметров, чекпоинты модели
"""
import hashlib
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import humanize
import torch
import torch.nn as nn

from .archgraph import ArchGraph, ArchNode, GraphFeatures, compute_features, graph_hash
from .checkpoint import read_records, write_records
from .decoder import DecoderHead, check_shape
from .encoder import EncoderInputs, GhnEncoder
from .errors import IoError, UnsupportedShape
from .models import BnRole, GhnConfig, OpKind, ParamSource, Provenance
from .target_net import ParamSet, init_node

logger = logging.getLogger(__name__)

PredictedParams = ParamSet


class GhnModel(nn.Module):
    """H_D(граф; θ): по графу архитектуры предсказывает все её параметры"""

    def __init__(self, config: Optional[GhnConfig] = None, seed: Optional[int] = None):
        super().__init__()
        self.config = config or GhnConfig()
        # глобальный генератор torch после построения остаётся прежним
        with torch.random.fork_rng(devices=[], enabled=seed is not None):
            if seed is not None:
                torch.manual_seed(seed)
            self.encoder = GhnEncoder(self.config)
            self.decoder = DecoderHead(self.config)
        logger.info(
            f"Built GHN (L={self.config.layers}, d={self.config.hidden}, "
            f"k={self.config.heads}) with {humanize.intword(param_count(self))} parameters"
        )

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "GhnModel":
        return cls(GhnConfig.preset(name, **overrides))

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.fc.weight.dtype

    @property
    def device(self) -> torch.device:
        return self.decoder.fc.weight.device

    def features(self, g: ArchGraph) -> GraphFeatures:
        return compute_features(g, self.config.max_dist)

    def is_supported(self, node: ArchNode) -> bool:
        if node.op not in self.config.supported_ops:
            return False
        try:
            check_shape(node.shape, self.config.decoder_spatial)
        except UnsupportedShape:
            return False
        return True

    def predict_params(self, g: ArchGraph,
                       feat: Optional[GraphFeatures] = None) -> PredictedParams:
        """
        Кодирует граф и декодирует тензор каждого параметрического узла.
        Узлы неподдерживаемого типа или формы получают стандартную
        инициализацию с детерминированным по графу сидом.
        """
        feat = feat if feat is not None else self.features(g)
        h, _ = self.encoder(EncoderInputs.from_graph(g, feat, self.device))

        tensors: Dict[int, torch.Tensor] = {}
        sources: Dict[int, ParamSource] = {}
        fallback_seed = None
        for node in g.parametric_nodes:
            if not self.is_supported(node):
                if fallback_seed is None:
                    fallback_seed = int(graph_hash(g)[:15], 16)
                gen = torch.Generator().manual_seed(fallback_seed + node.id)
                logger.warning(
                    f"{g.name}: node {node.id} ({node.op.value}, shape {node.shape}) "
                    f"is not supported by the decoder, using random init"
                )
                tensors[node.id] = init_node(node, gen, self.dtype).to(self.device)
                sources[node.id] = ParamSource.RANDOM_INIT
                continue
            w = self.decoder.decode_for_shape(h[node.id], node.shape)
            if node.op == OpKind.BATCHNORM and node.attrs.bn_role == BnRole.SCALE:
                w = w + 1.0
            tensors[node.id] = w
            sources[node.id] = ParamSource.PREDICTED
        return ParamSet(tensors, sources)

    def forward(self, g: ArchGraph) -> PredictedParams:
        return self.predict_params(g)


def predict_params(g: ArchGraph, feat: Optional[GraphFeatures], model: GhnModel) -> PredictedParams:
    return model.predict_params(g, feat)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_hash(model: nn.Module) -> str:
    """sha256 по именам и значениям всех тензоров state_dict"""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().float().numpy().tobytes())
    return digest.hexdigest()


def provenance(model: GhnModel, g: ArchGraph, p: ParamSet) -> Provenance:
    return Provenance(
        model_hash=model_hash(model),
        graph_hash=graph_hash(g),
        graph_name=g.name,
        slots=dict(p.sources),
    )


def save_model(model: GhnModel, path: Path, meta: Optional[dict] = None) -> None:
    """Чекпоинт гиперсети: конфигурация в заголовке, тензоры state_dict по имени"""
    records = [(name, tensor.detach().cpu().float().numpy())
               for name, tensor in model.state_dict().items()]
    header = dict(meta or {})
    header["config"] = model.config.model_dump(mode="json")
    write_records(path, "ghn", records, header)
    logger.info(f"Saved GHN checkpoint to {path}")


def load_model(path: Path, dtype: torch.dtype = torch.float32) -> Tuple[GhnModel, dict]:
    meta, records = read_records(path, "ghn")
    model = GhnModel(GhnConfig.model_validate(meta["config"]))
    state = {name: torch.from_numpy(array) for name, array in records}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise IoError(f"{path}: checkpoint does not match its config: {e}") from e
    return model.to(dtype), meta
