import pytest
import torch

from sdetok import data as datamod
from sdetok.persistence import ExperimentConfig
from sdetok.tokenizer import SDEConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    return datamod.make_toy_dataset(32, image_size=32, seed=0)


@pytest.fixture(scope="session")
def tiny_config():
    cfg = ExperimentConfig()
    cfg.tokenizer = SDEConfig(K=64, d=8, f=8, image_size=32, d_sem=16,
                              disc_start=10 ** 9)
    cfg.optimizer.total_steps = 60
    cfg.optimizer.batch_size = 8
    return cfg


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
