"""Shared fixtures; adds the project root to sys.path like scripts/run.py."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the slow training and acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training test (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_phantom_config():
    from coactseg.phantom import PhantomConfig
    return PhantomConfig(dims=(16, 16, 16), lesion_count_range=(1, 2),
                         lesion_radius_range_vox=(1, 2), new_lesion_count_range=(1, 1), seed=7)


@pytest.fixture
def tiny_net_config():
    from coactseg.network import SegNetConfig
    return SegNetConfig(levels=2, base_channels=2, head_channels=2, param_seed=3)
