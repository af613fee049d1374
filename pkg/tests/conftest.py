"""
Pytest fixture file that ensures the project root is on sys.path so imports like
'from savae.autodiff import ...' work when running pytest from the project root.

Long acceptance runs are marked `slow` and only run with `pytest --runslow`.
"""
import os
import sys

import numpy as np
import pytest

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from savae.models import SeqEncoder, SeqGenModel


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale acceptance run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_gen():
    # larger init range than training so gradients are not vanishingly small
    return SeqGenModel.init(vocab_size=5, embed_dim=3, hidden_dim=4, latent_dim=2, seed=1, init_range=0.5)


@pytest.fixture
def tiny_enc():
    return SeqEncoder.init(vocab_size=5, embed_dim=3, hidden_dim=4, latent_dim=2, seed=2, init_range=0.5)


@pytest.fixture
def tiny_batch():
    return np.array([[0, 1, 2, 3], [4, 3, 2, 1], [1, 1, 0, 2]], dtype=np.int64)
