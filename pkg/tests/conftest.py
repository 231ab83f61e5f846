import numpy as np
import pytest

from keyfort.data_io import Dataset, channel_stats
from keyfort.keyed_transform import generate_key
from keyfort.model import ModelConfig
from keyfort.trainer import TrainConfig, finetune, pretrain

TINY = ModelConfig(image_size=(8, 8), channels=3, vit_patch=2, embed_dim=16, num_heads=2, num_blocks=2,
                   mlp_ratio=2, num_classes=4)


def synthetic(n, seed, split="train", classes=4, noise=0.2):
    """Class prototypes (fixed) plus per-image noise, 8x8x3 in [0, 1]."""
    protos = np.random.default_rng(1234).random((classes, 3, 8, 8), dtype=np.float32)
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, n)
    x = np.clip(protos[y] + noise * rng.standard_normal((n, 3, 8, 8)).astype(np.float32), 0, 1)
    return Dataset(split, x.astype(np.float32), y, classes)


@pytest.fixture(scope="session")
def toy_data():
    tr = synthetic(512, 0)
    te = synthetic(128, 1, "test")
    tr.mean, tr.std = channel_stats(tr.images)
    te.mean, te.std = tr.mean, tr.std
    return tr, te


@pytest.fixture(scope="session")
def toy_models(toy_data):
    """(m_o, m_k) trained on the synthetic task; m_k uses key seed 1, P=2."""
    tr, te = toy_data
    cfg = TrainConfig(epochs=6, batch_size=32, lr=3e-3, hflip=False)
    m_o, _ = pretrain(tr, cfg, TINY)
    key = generate_key(1, 2, 3)
    m_k, _ = finetune(m_o, key, tr, TrainConfig(epochs=4, batch_size=32, lr=2e-3, hflip=False, mode="finetune_full"))
    return m_o, m_k
