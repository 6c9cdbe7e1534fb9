# tests/conftest.py
import os

# must precede any core/app import: Settings is read once per process
os.environ.setdefault("ENVIRONMENT", "testing")
os.environ.setdefault("LOG_TO_FILE", "false")
os.environ.setdefault("LOG_LEVEL", "WARNING")

import numpy as np
import pytest

from app.data import make_ring, split_ssl
from app.linalg import RngStream
from app.neuralnet import AdamConfig, ArchConfig, DiscriminatorNet, GeneratorNet


@pytest.fixture
def ring_pool():
    """Four well-separated modes, small enough for many training runs."""
    _, pool = make_ring(seed=3, num_classes=4, train_n=400, test_n=100)
    return pool


@pytest.fixture
def ring_data(ring_pool):
    return split_ssl(ring_pool, n_s=2, seed=11)


@pytest.fixture
def arch():
    return ArchConfig(latent_dim=3, hidden_units=8, data_dim=2)


@pytest.fixture
def adam():
    return AdamConfig()


@pytest.fixture
def pair(arch, ring_data):
    rng = RngStream(5, "fixture")
    g = GeneratorNet.initialize(arch, rng.child("g"))
    d = DiscriminatorNet.initialize(arch, ring_data.num_classes, rng.child("d"))
    return g, d


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
