import json

import numpy as np
import pytest
import torch

from ghnforge.data import (
    Batch, BatchStream, ensure_dataset, eval_batches, few_shot_subset, load_dataset,
    make_synthetic, save_dataset,
)
from ghnforge.errors import ConfigError, IoError
from ghnforge.models import DataConfig


def test_synthetic_is_deterministic(data_cfg):
    a, b = make_synthetic(data_cfg, 3), make_synthetic(data_cfg, 3)
    for split in ("train", "val"):
        np.testing.assert_array_equal(a[split][0], b[split][0])
        np.testing.assert_array_equal(a[split][1], b[split][1])
    images, labels = a["train"]
    assert images.shape == (data_cfg.n_train, 3, 8, 8)
    assert images.dtype == np.uint8
    assert labels.max() < data_cfg.num_classes


def test_saved_dataset_is_normalized(tiny_dataset, data_cfg):
    assert tiny_dataset.num_classes == data_cfg.num_classes
    assert len(tiny_dataset.train) == data_cfg.n_train
    per_channel = tiny_dataset.train.images.mean(dim=(0, 2, 3))
    assert torch.allclose(per_channel, torch.zeros(3), atol=1e-4)


def test_checksum_mismatch(tmp_path, data_cfg):
    save_dataset(tmp_path, "x", 4, make_synthetic(data_cfg, 0))
    labels = np.load(tmp_path / "val_labels.npy")
    np.save(tmp_path / "val_labels.npy", (labels + 1) % 4)
    with pytest.raises(IoError):
        load_dataset(tmp_path)


def test_missing_dataset(tmp_path):
    with pytest.raises(IoError):
        load_dataset(tmp_path / "nothing")


def test_ensure_dataset_uses_cache(tmp_path, data_cfg):
    first = ensure_dataset(data_cfg, 0, tmp_path)
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["num_classes"] == data_cfg.num_classes
    assert ensure_dataset(data_cfg, 0, tmp_path) == first
    assert ensure_dataset(data_cfg, 1, tmp_path) != first


def test_ensure_dataset_honors_cache_env(tmp_path, data_cfg):
    path = ensure_dataset(data_cfg, 0)
    assert str(path).startswith(str(tmp_path / "cache"))


def test_path_source_requires_path():
    with pytest.raises(ConfigError):
        ensure_dataset(DataConfig(source="path"), 0)


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(torch.zeros(2, 3, 4, 4), torch.zeros(3, dtype=torch.long))


def test_batch_stream_state_roundtrip(tiny_dataset):
    stream = BatchStream(tiny_dataset.train, 32, seed=7)
    for _ in range(4):
        next(stream)
    state = stream.state_dict()
    expected = [next(stream) for _ in range(3)]

    resumed = BatchStream(tiny_dataset.train, 32, seed=99)
    resumed.load_state_dict(state)
    for want in expected:
        got = next(resumed)
        assert torch.equal(got.images, want.images)
        assert torch.equal(got.labels, want.labels)


def test_eval_batches_cover_split(tiny_dataset):
    batches = list(eval_batches(tiny_dataset.val, 20))
    assert [len(b) for b in batches] == [20, 20, 8]
    assert sum(len(b) for b in eval_batches(tiny_dataset.val, 20, limit=30)) == 30


@pytest.mark.parametrize("n,size,expected", [
    (5, 4, [5]), (9, 4, [4, 5]), (8, 4, [4, 4]), (1, 4, [1]), (41, 20, [20, 21]),
])
def test_eval_batches_fold_single_sample_tail(tiny_dataset, n, size, expected):
    split = tiny_dataset.val.subset(list(range(n)))
    batches = list(eval_batches(split, size))
    assert [len(b) for b in batches] == expected
    assert torch.equal(torch.cat([b.labels for b in batches]), split.labels)


def test_few_shot_subset(tiny_dataset):
    a = few_shot_subset(tiny_dataset.train, 10, seed=4)
    b = few_shot_subset(tiny_dataset.train, 10, seed=4)
    assert a.ids == b.ids == sorted(a.ids)
    assert len(a) == 10
    assert torch.equal(a.images, tiny_dataset.train.images[a.ids])
    assert len(few_shot_subset(tiny_dataset.train, 10_000, seed=4)) == len(tiny_dataset.train)
