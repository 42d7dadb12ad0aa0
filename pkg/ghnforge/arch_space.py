"""
Генератор пространства случайных архитектур и манифест пространства
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .archgraph import ArchGraph, build_graph, graph_hash, graph_stats, parse_graph
from .errors import GenerationExhausted, IoError
from .models import ArchSpaceConfig, SpaceStats

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MAX_DOWNSAMPLES = 4


class _SpecBuilder:
    """Накапливает описание графа в порядке вставки"""

    def __init__(self, name: str):
        self.name = name
        self.nodes: List[Dict[str, Any]] = []
        self.edges: List[List[int]] = []

    def add(self, op: str, attrs: Optional[Dict[str, Any]], preds: List[int]) -> int:
        node_id = len(self.nodes)
        item: Dict[str, Any] = {"id": node_id, "op": op}
        if attrs:
            item["attrs"] = attrs
        self.nodes.append(item)
        self.edges.extend([p, node_id] for p in preds)
        return node_id

    def spec(self) -> Dict[str, Any]:
        return {"name": self.name, "nodes": self.nodes, "edges": self.edges}


class SpaceGenerator:
    """Сэмплер архитектур: цепочки, residual- и concat-блоки"""

    def __init__(self, cfg: ArchSpaceConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed)

    def _channels(self) -> int:
        lo, hi = self.cfg.channels
        return int(self.rng.integers(lo, hi + 1))

    def _kernel(self) -> int:
        return int(self.rng.choice(self.cfg.kernel_sizes))

    def _activation(self) -> str:
        return str(self.rng.choice([a.value for a in self.cfg.activations]))

    def _conv_unit(self, b: _SpecBuilder, x: int, channels: int, stride: int = 1,
                   act: bool = True) -> int:
        """conv → [bn scale → bn shift] → [активация]"""
        y = b.add("conv2d", {"channels": channels, "kernel": self._kernel(), "stride": stride}, [x])
        if self.rng.random() < self.cfg.bn_p:
            y = b.add("batchnorm", {"bn_role": "scale"}, [y])
            y = b.add("batchnorm", {"bn_role": "shift"}, [y])
        if act:
            y = b.add(self._activation(), None, [y])
        return y

    def sample_one(self, name: str) -> ArchGraph:
        cfg = self.cfg
        b = _SpecBuilder(name)
        x = b.add("input", {"channels": cfg.in_channels}, [])
        channels = self._channels()
        x = self._conv_unit(b, x, channels)
        downsamples = 0

        lo, hi = cfg.depth
        for _ in range(int(self.rng.integers(lo, hi + 1))):
            u = self.rng.random()
            if u < cfg.residual_p:
                y = self._conv_unit(b, x, channels)
                y = self._conv_unit(b, y, channels, act=False)
                x = b.add("add", None, [x, y])
                x = b.add(self._activation(), None, [x])
            elif u < cfg.residual_p + cfg.concat_p:
                left_channels, right_channels = self._channels(), self._channels()
                left = self._conv_unit(b, x, left_channels)
                right = self._conv_unit(b, x, right_channels)
                x = b.add("concat", None, [left, right])
                channels = left_channels + right_channels
            else:
                channels = self._channels()
                x = self._conv_unit(b, x, channels)

            if downsamples < MAX_DOWNSAMPLES and self.rng.random() < cfg.downsample_p:
                downsamples += 1
                if self.rng.random() < 0.5:
                    pool = "maxpool" if self.rng.random() < 0.5 else "avgpool"
                    x = b.add(pool, {"kernel": 3, "stride": 2}, [x])
                else:
                    channels = self._channels()
                    x = self._conv_unit(b, x, channels, stride=2)

        x = b.add("global_avg_pool", None, [x])
        if self.rng.random() < cfg.hidden_linear_p:
            x = b.add("linear", {"channels": self._channels()}, [x])
            x = b.add(self._activation(), None, [x])
        b.add("classifier_head", {"channels": cfg.num_classes}, [x])
        return build_graph(b.spec())

    def sample(self) -> List[ArchGraph]:
        cfg = self.cfg
        graphs: List[ArchGraph] = []
        seen = set()
        budget = cfg.max_attempts_per_arch * cfg.n_archs
        attempts = 0
        while len(graphs) < cfg.n_archs:
            if attempts >= budget:
                raise GenerationExhausted(
                    f"Space {cfg.name}: only {len(graphs)} of {cfg.n_archs} distinct "
                    f"architectures after {attempts} attempts"
                )
            attempts += 1
            g = self.sample_one(f"{cfg.name}_{len(graphs):04d}")
            # имя не участвует в проверке уникальности
            key = graph_hash(g.model_copy(update={"name": ""}))
            if key in seen:
                logger.debug(f"Duplicate architecture rejected in space {cfg.name}")
                continue
            seen.add(key)
            graphs.append(g)
        return graphs


def sample_space(cfg: ArchSpaceConfig) -> List[ArchGraph]:
    """Сэмплирует cfg.n_archs различных архитектур"""
    logger.info(f"Sampling {cfg.n_archs} architectures for space {cfg.name} (seed={cfg.rng_seed})")
    graphs = SpaceGenerator(cfg).sample()
    stats = space_stats(graphs)
    logger.info(
        f"Space {cfg.name}: mean params {stats.human_params}, mean nodes {stats.mean_nodes:.1f}, "
        f"mean degree {stats.mean_degree:.3f}, mean path length {stats.mean_path_length:.3f}"
    )
    return graphs


def space_stats(graphs: List[ArchGraph]) -> SpaceStats:
    per_graph = [graph_stats(g) for g in graphs]
    return SpaceStats(
        n_graphs=len(graphs),
        mean_params=float(np.mean([s["params"] for s in per_graph])),
        mean_nodes=float(np.mean([s["nodes"] for s in per_graph])),
        mean_degree=float(np.mean([s["degree"] for s in per_graph])),
        mean_path_length=float(np.mean([s["path_length"] for s in per_graph])),
    )


def write_space(graphs: List[ArchGraph], cfg: ArchSpaceConfig, out_dir: Path) -> Path:
    """Записывает графы и манифест пространства"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        files = []
        for g in graphs:
            file_name = f"{g.name}.json"
            (out_dir / file_name).write_text(g.to_json(), encoding="utf-8")
            files.append({"file": file_name, "hash": graph_hash(g)})
        manifest = {
            "config": cfg.model_dump(mode="json"),
            "stats": space_stats(graphs).model_dump(),
            "graphs": files,
        }
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write architecture space to {out_dir}: {e}") from e
    logger.info(f"Wrote {len(graphs)} architectures to {out_dir}")
    return path


def load_space(space_dir: Path) -> Tuple[List[ArchGraph], Dict[str, Any]]:
    """Читает пространство архитектур по манифесту"""
    space_dir = Path(space_dir)
    try:
        manifest = json.loads((space_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
        graphs = [
            parse_graph((space_dir / item["file"]).read_text(encoding="utf-8"))
            for item in manifest["graphs"]
        ]
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise IoError(f"Cannot read architecture space from {space_dir}: {e}") from e
    return graphs, manifest
