import copy

import pytest
import torch

from ghnforge.arch_space import sample_space
from ghnforge.archgraph import build_graph
from ghnforge.data import Batch, load_dataset, make_synthetic, save_dataset
from ghnforge.ghn import GhnModel
from ghnforge.models import ArchSpaceConfig, DataConfig, GhnConfig

NUM_CLASSES = 4


def chain_spec(num_classes: int = NUM_CLASSES, channels: int = 8) -> dict:
    return {
        "name": "chain",
        "nodes": [
            {"id": "x", "op": "input", "attrs": {"channels": 3}},
            {"id": "conv", "op": "conv2d", "attrs": {"channels": channels, "kernel": 3}},
            {"id": "bn_s", "op": "batchnorm", "attrs": {"bn_role": "scale"}},
            {"id": "bn_b", "op": "batchnorm", "attrs": {"bn_role": "shift"}},
            {"id": "act", "op": "relu"},
            {"id": "gap", "op": "global_avg_pool"},
            {"id": "fc", "op": "classifier_head", "attrs": {"channels": num_classes}},
        ],
        "edges": [["x", "conv"], ["conv", "bn_s"], ["bn_s", "bn_b"], ["bn_b", "act"],
                  ["act", "gap"], ["gap", "fc"]],
    }


def residual_spec(num_classes: int = NUM_CLASSES) -> dict:
    return {
        "name": "residual",
        "nodes": [
            {"id": 0, "op": "input"},
            {"id": 1, "op": "conv2d", "attrs": {"channels": 8, "kernel": 3}},
            {"id": 2, "op": "relu"},
            {"id": 3, "op": "conv2d", "attrs": {"channels": 8, "kernel": 1}},
            {"id": 4, "op": "batchnorm", "attrs": {"bn_role": "scale"}},
            {"id": 5, "op": "add"},
            {"id": 6, "op": "silu"},
            {"id": 7, "op": "maxpool"},
            {"id": 8, "op": "global_avg_pool"},
            {"id": 9, "op": "linear", "attrs": {"channels": 6}},
            {"id": 10, "op": "classifier_head", "attrs": {"channels": num_classes}},
        ],
        "edges": [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [2, 5], [5, 6], [6, 7], [7, 8],
                  [8, 9], [9, 10]],
    }


@pytest.fixture
def chain_graph():
    return build_graph(chain_spec())


@pytest.fixture
def residual_graph():
    return build_graph(residual_spec())


@pytest.fixture
def tiny_ghn_cfg():
    return GhnConfig(layers=2, hidden=16, heads=4)


@pytest.fixture
def tiny_model(tiny_ghn_cfg):
    return GhnModel(tiny_ghn_cfg, seed=0)


@pytest.fixture
def space_cfg():
    return ArchSpaceConfig(name="t", n_archs=6, depth=(1, 2), channels=(4, 8),
                           num_classes=NUM_CLASSES, rng_seed=0)


@pytest.fixture
def tiny_space(space_cfg):
    return sample_space(space_cfg)


@pytest.fixture(scope="session")
def data_cfg():
    return DataConfig(name="tiny", n_train=96, n_val=48, num_classes=NUM_CLASSES, image_size=8)


@pytest.fixture(scope="session")
def _dataset(tmp_path_factory, data_cfg):
    path = tmp_path_factory.mktemp("dataset")
    save_dataset(path, data_cfg.name, data_cfg.num_classes, make_synthetic(data_cfg, seed=0))
    return load_dataset(path)


@pytest.fixture
def tiny_dataset(_dataset):
    return copy.deepcopy(_dataset)


@pytest.fixture
def batch(tiny_dataset):
    split = tiny_dataset.train
    return Batch(split.images[:16], split.labels[:16])


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("GHNFORGE_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.delenv("GHNFORGE_SEED", raising=False)


@pytest.fixture
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
