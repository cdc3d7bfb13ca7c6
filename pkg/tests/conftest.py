import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset():
    """2 classes x 3 domains, 8 examples per cell, 8x8 pixels."""
    from rcerm.data import generate

    return generate(seed=1, n_per_cell=8, h=8, w=8, n_classes=2, n_domains=3)


@pytest.fixture
def tiny_config():
    from rcerm.trainer import TrainConfig

    return TrainConfig(algorithm="rcerm", steps=3, batch_per_cell=2, n_classes=2,
                       n_domains=3, embed_dim=8, hidden_dims=(8, 8), queue_sz=6,
                       tau=0.2, lam=0.5, mu=0.9, lr=1e-3, seed=5, eval_every=2,
                       holdout_domain=2, small_frac=0.25)
