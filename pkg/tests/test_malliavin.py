import math

import numpy as np
import pytest

from condgreeks.errors import ContractError, DegenerateConstraintError
from condgreeks.malliavin import (
    WeightProcess,
    constant_functional,
    default_weight,
    integral_functional,
    malliavin_functional,
    malliavin_state,
    node_functional,
    skorohod_adapted,
    skorohod_expand,
    tangent,
    weighted_time_integral,
)
from condgreeks.sde import RngStream, build_grid, simulate_path

from test_sde import gbm


def test_bs_tangent_is_one(bs_setup):
    cfg, model, grid, _ = bs_setup
    path = simulate_path(model, grid, RngStream(0, 0), 5)
    tan = tangent(path, model)
    assert np.array_equal(tan.Y, np.ones_like(tan.Y))


def test_malliavin_matrix_is_strictly_causal():
    model, grid = gbm(), build_grid(1.0, 6)
    path = simulate_path(model, grid, RngStream(0, 0), 3)
    D = malliavin_state(path, model).full()
    j, k = np.meshgrid(np.arange(grid.M), np.arange(grid.M + 1), indexing="ij")
    assert np.all(D[:, j >= k] == 0.0)


def test_malliavin_column_matches_noise_perturbation():
    # D_{t_j} X_k is the response of X_k to the j-th increment sqrt(dt) xi_{j+1}
    model, grid = gbm(), build_grid(1.0, 6)
    path = simulate_path(model, grid, RngStream(4, 0), 4)
    D = malliavin_state(path, model)
    eps = 1e-6
    for j in range(grid.M):
        for k in (j + 1, grid.M):
            up, dn = path.noises.copy(), path.noises.copy()
            up[:, j] += eps
            dn[:, j] -= eps
            Xu = simulate_path(model, grid, noises=up, n=4).states[:, k]
            Xd = simulate_path(model, grid, noises=dn, n=4).states[:, k]
            fd = (Xu - Xd) / (2 * eps * grid.sqrt_dt)
            assert np.allclose(D.column(k)[:, j], fd, rtol=1e-6)


def test_node_and_integral_rows_chain_rule():
    model, grid = gbm(), build_grid(1.0, 5)
    path = simulate_path(model, grid, RngStream(6, 0), 3)
    f = node_functional([2, 5], lambda a, b: a * b, lambda a, b: (b, a))
    g = integral_functional(np.sin, np.cos)
    eps = 1e-6
    for spec in (f, g):
        row = malliavin_functional(spec, path, None, model)
        for j in range(grid.M):
            up, dn = path.noises.copy(), path.noises.copy()
            up[:, j] += eps
            dn[:, j] -= eps
            vu = spec.value(model, simulate_path(model, grid, noises=up, n=3))
            vd = spec.value(model, simulate_path(model, grid, noises=dn, n=3))
            assert np.allclose(row[:, j], (vu - vd) / (2 * eps * grid.sqrt_dt), rtol=1e-5, atol=1e-9)


def test_default_weight_normalisation():
    grid = build_grid(1.0, 64)
    row = np.where(np.arange(64) < 32, 0.2, 0.0)
    u = default_weight(row, grid)
    assert math.fsum(row * u.values * grid.dt) == pytest.approx(1.0, abs=1e-15)
    assert np.all(u.values[:32] == u.values[0])
    assert u.values[0] == pytest.approx(2 / (0.2 * 1.0), rel=1e-15)
    with pytest.raises(DegenerateConstraintError):
        default_weight(np.zeros(64), grid)
    with pytest.raises(ContractError):
        default_weight(np.random.default_rng(0).normal(size=(3, 64)), grid)
    with pytest.raises(ContractError):
        default_weight(np.ones(10), grid)


def test_adapted_skorohod_is_ito_sum(bs_setup):
    cfg, model, grid, _ = bs_setup
    path = simulate_path(model, grid, RngStream(1, 0), 100)
    u = WeightProcess(np.linspace(0.5, 1.5, grid.M), adapted=True)
    ito = np.array([math.fsum(u.values * grid.sqrt_dt * xi) for xi in path.noises])
    assert np.max(np.abs(skorohod_adapted(u, path) - ito)) <= 1e-13
    zero = simulate_path(model, grid, noises=np.zeros(grid.M))
    assert skorohod_adapted(u, zero) == 0.0
    with pytest.raises(ContractError):
        skorohod_adapted(WeightProcess(u.values, adapted=False), path)


def test_skorohod_expand(bs_setup):
    cfg, model, grid, _ = bs_setup
    path = simulate_path(model, grid, RngStream(1, 0), 10)
    u = WeightProcess(np.full(grid.M, 2.0), adapted=True)
    F = np.full(10, 3.0)
    c = constant_functional(3.0)
    DF = malliavin_functional(c, path, None, model)
    assert np.allclose(skorohod_expand(F, DF, u, path), 3.0 * skorohod_adapted(u, path))
    DF = np.ones((10, grid.M))
    assert np.allclose(skorohod_expand(F, DF, u, path) - 3.0 * skorohod_adapted(u, path),
                       -weighted_time_integral(DF, u, grid))
