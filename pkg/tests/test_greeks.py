import math

import numpy as np
import pytest

from condgreeks.black_scholes import BsConfig, bs_functionals, bs_model
from condgreeks.conditional import ConditionalProblem
from condgreeks.errors import ConfigError, IllConditionedError
from condgreeks.greeks import (
    conditional_greek,
    quotient_gradient,
    quotient_rule,
    sgd_minimize,
)
from condgreeks.malliavin import constant_functional


def test_quotient_identity():
    E1, E2, dE1, dE2 = 3.0, 0.5, -1.25, 2.0
    assert quotient_rule(E1, E2, dE1, dE2) == (0.5 * -1.25 - 3.0 * 2.0) / 0.25
    # analytic partials versus finite differences
    x = np.array([E1, E2, dE1, dE2])
    g = quotient_gradient(*x)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-6
        fd = (quotient_rule(*(x + e)) - quotient_rule(*(x - e))) / 2e-6
        assert g[i] == pytest.approx(fd, rel=1e-6)


def test_greek_result_components(bs_setup):
    cfg, model, grid, F = bs_setup
    res = conditional_greek(model, grid, F.problem, 20_000, "wd", 1)
    assert res.n == 20_000
    for st in (res.E1, res.E2, res.dE1, res.dE2):
        assert st.n == 20_000 and st.stderr > 0
    assert res.dL == pytest.approx(quotient_rule(res.E1.mean, res.E2.mean, res.dE1.mean, res.dE2.mean))
    assert res.L == pytest.approx(res.E1.mean / res.E2.mean)
    lo, hi = res.dL_ci95
    assert lo < res.dL < hi
    with pytest.raises(ConfigError):
        conditional_greek(model, grid, F.problem, 100, "fd")


@pytest.mark.parametrize("method", ["wd", "score"])
def test_constant_loss_has_zero_greek(bs_setup, method):
    cfg, model, grid, F = bs_setup
    problem = ConditionalProblem(constant_functional(4.0), F.g, weight=F.problem.weight)
    res = conditional_greek(model, grid, problem, 50_000, method, 2)
    assert res.L == pytest.approx(4.0, abs=1e-12)
    assert abs(res.dL) <= 3 * res.dL_stderr + 1e-9


def test_martingale_case_has_zero_greek():
    cfg = BsConfig(K=0.0, r=0.0)
    model, grid = bs_model(cfg), cfg.grid()
    F = bs_functionals(cfg, grid)
    res = conditional_greek(model, grid, F.problem, 100_000, "wd", 3)
    assert abs(res.dL) <= 3 * res.dL_stderr


def test_guard_propagates():
    cfg = BsConfig(s=40.0)
    model, grid = bs_model(cfg), cfg.grid()
    with pytest.raises(IllConditionedError):
        conditional_greek(model, grid, bs_functionals(cfg, grid).problem, 1000, "wd")


class _Res:
    def __init__(self, L=1.0, dL=0.0):
        self.L, self.dL, self.dL_stderr = L, dL, 0.1


def test_sgd_zero_step_and_box():
    flat = sgd_minimize(lambda th, n, ns: (5.0, _Res()), 0.3, 0.0, 5, 10, (0.1, 1.0))
    assert flat.theta == [0.3] * 6
    clamped = sgd_minimize(lambda th, n, ns: (100.0, _Res()), 0.3, 1.0, 3, 10, (0.1, 1.0))
    assert clamped.theta[-1] == 0.1
    rows = list(clamped.rows())
    assert len(rows) == 4 and math.isnan(rows[-1][2])
    with pytest.raises(ConfigError):
        sgd_minimize(lambda th, n, ns: (0.0, _Res()), 2.0, 0.1, 1, 10, (0.1, 1.0))


def test_sgd_quadratic_converges():
    trace = sgd_minimize(lambda th, n, ns: (2 * (th - 0.5), _Res()), 0.9, 0.25, 40, 10, (0.0, 1.0))
    assert trace.theta[-1] == pytest.approx(0.5, abs=1e-9)
    dec = sgd_minimize(lambda th, n, ns: (2 * (th - 0.5), _Res()), 0.9, 0.5, 200, 10, (0.0, 1.0), decreasing=True)
    assert abs(dec.theta[-1] - 0.5) < 0.05


def test_sgd_guard_retry_doubles_N():
    calls = []

    def flaky(theta, n, ns):
        calls.append(n)
        if len(calls) < 3:
            raise IllConditionedError("noisy", {})
        return 0.0, _Res()

    trace = sgd_minimize(flaky, 0.3, 0.1, 1, 100, (0.1, 1.0))
    assert calls == [100, 200, 400]
    assert trace.N_used == [400]

    def hopeless(theta, n, ns):
        raise IllConditionedError("never", {})

    with pytest.raises(IllConditionedError) as info:
        sgd_minimize(hopeless, 0.3, 0.1, 2, 100, (0.1, 1.0))
    assert info.value.diagnostics["trace"].theta == [0.3]


def test_method_comparison_is_paired(bs_setup):
    from condgreeks.greeks import compare_methods

    cfg, model, grid, F = bs_setup
    cmp = compare_methods(model, grid, F.problem, 20_000, 5)
    single = conditional_greek(model, grid, F.problem, 20_000, "wd", 5)
    # the wd half of the paired run is the same computation as a wd-only run
    assert cmp.wd.dL == pytest.approx(single.dL, rel=1e-12)
    assert cmp.wd.L == cmp.score.L
    assert 0 < cmp.gap_stderr < math.hypot(cmp.wd.dL_stderr, cmp.score.dL_stderr) * 1.5
