"""
Shared fixtures: isolated settings, small synthetic corpora and a tiny SM-RNN.
"""
import numpy as np
import pytest

from app.core.config import Settings
from app.schemas.models import DatasetKind, SMConfig
from app.services.data import generate_synthetic_corpus
from app.services.smrnn import SMRNNModel


@pytest.fixture
def app_settings(tmp_path) -> Settings:
    data_dir = tmp_path / "data"
    return Settings(
        data_dir=data_dir,
        mnist_dir=data_dir / "mnist",
        strokes_dir=data_dir / "strokes",
        results_dir=tmp_path / "results",
        _env_file=None,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def spatial_corpus():
    return generate_synthetic_corpus(DatasetKind.SPATIAL, 80, seed=3)


@pytest.fixture(scope="session")
def temporal_corpus():
    return generate_synthetic_corpus(DatasetKind.TEMPORAL, 80, seed=3)


@pytest.fixture
def tiny_config() -> SMConfig:
    return SMConfig(marks=4, stimulus_dim=3, hidden_dim=5, class_hidden_dim=4, num_classes=3)


@pytest.fixture
def tiny_model(tiny_config) -> SMRNNModel:
    return SMRNNModel(tiny_config, seed=0)
