import numpy as np
import pytest

from condgreeks.black_scholes import BsConfig, bs_functionals, bs_model


@pytest.fixture
def bs_cfg():
    return BsConfig()


@pytest.fixture
def bs_setup(bs_cfg):
    grid = bs_cfg.grid()
    return bs_cfg, bs_model(bs_cfg), grid, bs_functionals(bs_cfg, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def within(value, target, stderr, k=3.0):
    return abs(value - target) <= k * stderr
