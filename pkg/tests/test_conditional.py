import numpy as np
import pytest

from condgreeks.black_scholes import BsConfig, bs_functionals, bs_model, bs_oracle_price
from condgreeks.conditional import (
    ConditionalProblem,
    contributions,
    estimate_L,
    kernel_baseline_L,
    silverman_bandwidth,
)
from condgreeks.errors import ContractError, IllConditionedError, KernelStarvationError
from condgreeks.malliavin import constant_functional
from condgreeks.sde import RngStream, simulate_path


def test_closed_and_generic_routes_agree(bs_setup):
    cfg, model, grid, F = bs_setup
    path = simulate_path(model, grid, RngStream(9, 0), 1000)
    c1, c2 = contributions(F.problem, model, path, "closed")
    g1, g2 = contributions(F.generic, model, path, "generic")
    assert np.max(np.abs(c1 - g1)) <= 1e-12
    assert np.max(np.abs(c2 - g2)) <= 1e-12
    with pytest.raises(ContractError):
        contributions(F.generic, model, path, "closed")
    with pytest.raises(ContractError):
        contributions(F.problem, model, path, "sideways")


def test_price_matches_oracle(bs_setup):
    cfg, model, grid, F = bs_setup
    est = estimate_L(model, grid, F.problem, 50_000, master_seed=1)
    assert abs(est.value - bs_oracle_price(cfg)) <= 3 * est.stderr
    lo, hi = est.ci95
    assert lo < est.value < hi


def test_worker_count_does_not_change_result(bs_setup):
    cfg, model, grid, F = bs_setup
    a = estimate_L(model, grid, F.problem, 20_000, 3, block_size=4000, workers=1)
    b = estimate_L(model, grid, F.problem, 20_000, 3, block_size=4000, workers=3)
    assert a.value == b.value and a.stderr == b.stderr


def test_constant_loss_gives_constant(bs_setup):
    cfg, model, grid, F = bs_setup
    problem = ConditionalProblem(constant_functional(2.5), F.g, weight=F.problem.weight)
    est = estimate_L(model, grid, problem, 5000, 2)
    assert est.value == pytest.approx(2.5, abs=1e-12)


def test_guard_rejects_tail_conditioning():
    cfg = BsConfig(s=40.0)
    model, grid = bs_model(cfg), cfg.grid()
    F = bs_functionals(cfg, grid)
    with pytest.raises(IllConditionedError) as info:
        estimate_L(model, grid, F.problem, 1000, 0)
    assert {"den_mean", "den_stderr", "n"} <= set(info.value.diagnostics)
    est = estimate_L(model, grid, F.problem, 1000, 0, guard=False)
    assert not est.guard_ok()


def test_kernel_baseline(bs_setup):
    cfg, model, grid, F = bs_setup
    est = kernel_baseline_L(model, grid, F.ell, F.g, 100_000, master_seed=4)
    assert abs(est.value - bs_oracle_price(cfg)) < 0.5
    with pytest.raises(ContractError):
        kernel_baseline_L(model, grid, F.ell, F.g, 100, bandwidth=0.0)
    far = BsConfig(s=10.0)
    Ff = bs_functionals(far, far.grid())
    with pytest.raises(KernelStarvationError):
        kernel_baseline_L(bs_model(far), far.grid(), Ff.ell, Ff.g, 1000, bandwidth=1e-3)


def test_silverman_rule():
    x = np.random.default_rng(0).normal(0, 2.0, 10_000)
    assert silverman_bandwidth(x) == pytest.approx(2.0 * 10_000 ** -0.2, rel=0.05)
