"""
Shared fixtures for the VTI test suite
"""

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import numpy as np
import pytest

from vti.schemas.config import NetworkConfig, TrainConfig
from vti.services.dataset_service import synth_generate, vocab_from_records


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training/acceptance checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_network(vocab_size: int, **overrides) -> NetworkConfig:
    """Smallest network that still has every component"""
    values = dict(
        image_size=32, d_v=8, d_h=8, d_z=4, d_e=8, d_hidden=8, n_max=7,
        visual_head_dim=2, language_heads=2, transformer_layers=1, max_positions=16,
        vocab_size=vocab_size,
    )
    values.update(overrides)
    return NetworkConfig(**values)


@pytest.fixture
def synth_records():
    """24 synthetic records, seed 3"""
    return synth_generate(24, seed=3)


@pytest.fixture
def vocab(synth_records):
    return vocab_from_records(synth_records, min_freq=1)


@pytest.fixture
def examples(synth_records, vocab):
    return [vocab.encode_record(r) for r in synth_records]


@pytest.fixture
def tiny_cfg(vocab):
    return tiny_network(len(vocab))


@pytest.fixture
def train_cfg():
    return TrainConfig(
        learning_rate=3e-3, batch_size=4, max_epochs=2, patience=5,
        dropout_rate=0.0, anneal_cycles=1, seed=11,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
