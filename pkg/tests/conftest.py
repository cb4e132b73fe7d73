import pytest

from chyvae.data import CorrConfig, EllipseGenerator, FactorSpec, generate_dataset
from chyvae.distributions import HyperpriorParams, RngStream
from chyvae.linalg import SpdMatrix
from chyvae.nn import ModelConfig, init_params
from chyvae.trainer import TrainConfig

SMALL_HIDDEN = (8, 8)


def small_model(input_dim: int = 16, latent_dim: int = 3, mode: str = "chyvae", seed: int = 0):
    """Seeded parameters of a tiny encoder/decoder pair."""
    config = ModelConfig(input_dim=input_dim, latent_dim=latent_dim, hidden=SMALL_HIDDEN, mode=mode)
    return init_params(config, RngStream(seed).child(0))


def small_train_config(**overrides) -> TrainConfig:
    """A 16×16 CHyVAE run small enough for unit tests."""
    values = dict(
        model="chyvae",
        nu=10.0,
        latent_dim=3,
        hidden=(16,),
        batch_size=8,
        steps=6,
        eval_interval=3,
        seed=5,
        dataset_size=40,
        height=16,
        width=16,
        lr=1e-3,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def hyperprior():
    return HyperpriorParams.from_sigma0(SpdMatrix.identity(3), 10.0)


@pytest.fixture
def generator():
    return EllipseGenerator(CorrConfig(0.7, 0.7), FactorSpec.default(), 32, 32)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(40, CorrConfig(0.7, 0.7), FactorSpec.default(), 16, 16, seed=5)
