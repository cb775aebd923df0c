import math

import numpy as np

from condgreeks.black_scholes import BsConfig, bs_model
from condgreeks.score import score_gradient, score_path
from condgreeks.sde import RngStream, simulate_path
from condgreeks.weak_derivative import single_run_gradient
from conftest import within


def test_score_has_zero_mean_per_step():
    cfg = BsConfig(M=8)
    model, grid = bs_model(cfg), cfg.grid()
    path = simulate_path(model, grid, RngStream(1, 0), 100_000)
    sp = score_path(model, path)
    se = sp.steps.std(axis=0) / math.sqrt(path.n)
    assert np.all(np.abs(sp.steps.mean(axis=0)) <= 3.5 * se)
    tot = sp.total
    assert within(tot.mean(), 0.0, tot.std() / math.sqrt(tot.size))


def test_constant_functional_has_zero_gradient():
    cfg = BsConfig(M=8)
    model, grid = bs_model(cfg), cfg.grid()
    st = score_gradient(model, lambda m, p: np.ones(p.states.shape[0]), grid, 50_000, 2)
    assert within(st.mean, 0.0, st.stderr)


def test_terminal_state_and_agreement_with_wd():
    cfg = BsConfig(M=16)
    model, grid = bs_model(cfg), cfg.grid()

    def C(m, p):
        return p.states[..., -1]

    sc = score_gradient(model, C, grid, 400_000, 3)
    wd = single_run_gradient(model, C, grid, 100_000, 4)
    assert within(sc.mean, -cfg.theta * cfg.T, sc.stderr)
    assert abs(sc.mean - wd.mean) <= 3 * math.hypot(sc.stderr, wd.stderr)
    assert sc.variance > 10 * wd.variance


def test_empty_run():
    cfg = BsConfig(M=8)
    assert score_gradient(bs_model(cfg), lambda m, p: p.states[..., -1], cfg.grid(), 0).n == 0
