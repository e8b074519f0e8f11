import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mgcl.config import config_from_dict
from mgcl.synthdata import generate_dataset

torch.set_num_threads(1)

TINY_OVERRIDES = {
    "data.n_samples": "24",
    "data.num_classes": "3",
    "data.image_size": "32",
    "aug.output_size": "32",
    "aug.crop_min": "0.6",
    "model.width": "8",
    "model.embed_dim": "8",
    "loss.strategy": "pm",
    "kmeans.k": "4",
    "kmeans.iters": "3",
    "proto.k": "6",
    "train.batch_size": "8",
    "train.epochs": "1",
    "queue.global_capacity": "64",
    "queue.dense_capacity": "64",
    "probe.epochs": "5",
}


def tiny_config(**extra: str):
    values = dict(TINY_OVERRIDES)
    values.update({k: str(v) for k, v in extra.items()})
    return config_from_dict(values)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(24, 3, 32, rng_seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def unit_rows(rng, n, d, dtype=np.float64):
    rows = rng.normal(size=(n, d)).astype(dtype)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
