"""Pytest configuration and shared fixtures."""

import logging
import tempfile
from pathlib import Path

import numpy as np
import pytest
from loguru import logger

from dgadr.config import LossConfig, SynthConfig, TrainConfig
from dgadr.data import Dataset, generate_synthetic


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def caplog(caplog):
    """Forward loguru records to pytest's caplog."""

    class PropagateHandler(logging.Handler):
        def emit(self, record):
            logging.getLogger(record.name).handle(record)

    handler_id = logger.add(PropagateHandler(), format="{message}", level="DEBUG")
    yield caplog
    logger.remove(handler_id)


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_synth_config():
    """Three small, well separated domains."""
    return SynthConfig(
        num_domains=3,
        num_classes=3,
        feature_dim=4,
        samples_per_domain=60,
        class_skew=2.0,
        domain_shift_scale=0.5,
        intra_domain_subclusters=2,
        noise_std=0.5,
        seed=11,
    )


@pytest.fixture
def small_dataset(small_synth_config):
    return generate_synthetic(small_synth_config)


@pytest.fixture
def tiny_dataset():
    """Hand-written 3-domain dataset with two classes per domain."""
    features = np.array(
        [
            [1.0, 0.0],
            [0.9, 0.1],
            [0.0, 1.0],
            [1.0, 0.2],
            [0.1, 0.9],
            [0.2, 1.0],
            [0.8, -0.1],
            [-0.1, 1.1],
        ]
    )
    labels = np.array([0, 0, 1, 0, 1, 1, 0, 1])
    domains = np.array([0, 0, 0, 1, 1, 1, 2, 2])
    return Dataset(features, labels, domains, num_classes=2)


@pytest.fixture
def fast_train_config():
    """A few epochs of a small network; fast enough for unit tests."""
    return TrainConfig(
        hidden_dims=(8, 6),
        loss=LossConfig(alpha=1.0),
        batch_size=24,
        epochs=3,
        lr=0.05,
        jitter_strength=0.1,
        seeds=(0, 1),
        eval_every=2,
    )


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line("markers", "integration: marks tests as integration tests")
    config.addinivalue_line("markers", "unit: marks tests as unit tests")
