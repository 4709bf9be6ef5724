import numpy as np
import pytest

from protomem.config import RunConfig


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False, help='Run the slow training tests.')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: trains models for hundreds of steps')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return

    skip_slow = pytest.mark.skip(reason='needs --run-slow')

    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """ A run small enough to train for a few steps in well under a second. """
    return RunConfig(layers=1, d_model=16, heads=2, ffn_dim=32, d_feat=8, m=4, t_bank=3, stride=1, topk=2, batch=8,
                     train_samples=64, val_samples=16, test_samples=0, warmup=2, constant_until=10, decay_until=20,
                     steps=6, trials=200)
