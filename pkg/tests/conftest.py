import numpy as np
import pytest

from trajood.denoiser import DenoiserConfig
from trajood.synthetic import generate_family, id_family
from trajood.trainer import TrainConfig, Trainer, dataset_stats


@pytest.fixture(scope="session")
def tiny_graphs():
    return generate_family(id_family(seed=3, name="tiny"), 12)


@pytest.fixture(scope="session")
def tiny_model(tiny_graphs):
    """Untrained small denoiser; enough for structural properties."""
    tc = TrainConfig(model=DenoiserConfig(n_layers=2, hidden=16, edge_dim=8, d=4), seed=0)
    tr = Trainer(tiny_graphs, tc)
    return tr.checkpoint([], dataset_stats(tiny_graphs)).denoiser()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
