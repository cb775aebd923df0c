"""Ratio estimator for E[l(X) | g(X) = 0] and the kernel-smoothing baseline.

The conditional expectation is written as E1 / E2 with

    E1 = E[1{g > 0} (l S(u) - sum_k D_k l u_k dt)]
    E2 = E[1{g > 0} S(u)]

where u is an adapted weight normalised against the Malliavin row of g.
Both expectations are unconditional, so plain Monte Carlo applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, IllConditionedError, KernelStarvationError
from .malliavin import (
    FunctionalSpec,
    WeightProcess,
    default_weight,
    malliavin_functional,
    malliavin_state,
    skorohod_adapted,
    weighted_time_integral,
)
from .runner import DEFAULT_BLOCK, run_blocks
from .sde import Array, EulerPath, ModelSpec, RngStream, TimeGrid, simulate_path
from .stats import EstimatorStats, JointStats, Z95, merge_all

GUARD_SIGMAS = 5.0
GUARD_FLOOR = 1e-12


@dataclass(frozen=True)
class ConditionalProblem:
    """Loss ``ell``, constraint ``g`` and how to obtain the weight process.

    ``weight`` maps (model, grid) to a deterministic adapted weight; when it
    is None the default weight is derived from the Malliavin row of ``g``.
    ``closed`` optionally returns the (E1, E2) contributions from exact
    formulas and is used instead of the generic route when present.
    """

    ell: FunctionalSpec
    g: FunctionalSpec
    weight: Callable[[ModelSpec, TimeGrid], WeightProcess] | None = None
    closed: Callable[[ModelSpec, EulerPath], tuple[Array, Array]] | None = None


def e1_contribution(model: ModelSpec, path: EulerPath, ell: FunctionalSpec, g: FunctionalSpec,
                    u: WeightProcess, D=None, skorohod: Array | None = None) -> Array:
    S = skorohod_adapted(u, path) if skorohod is None else skorohod
    Dl = malliavin_functional(ell, path, D, model)
    correction = weighted_time_integral(Dl, u, path.grid)
    ind = g.value(model, path) > 0
    return np.where(ind, ell.value(model, path) * S - correction, 0.0)


def e2_contribution(model: ModelSpec, path: EulerPath, g: FunctionalSpec, u: WeightProcess,
                    skorohod: Array | None = None) -> Array:
    S = skorohod_adapted(u, path) if skorohod is None else skorohod
    return np.where(g.value(model, path) > 0, S, 0.0)


def problem_weight(problem: ConditionalProblem, model: ModelSpec, path: EulerPath, D=None) -> WeightProcess:
    if problem.weight is not None:
        return problem.weight(model, path.grid)
    Dg = malliavin_functional(problem.g, path, D, model)
    return default_weight(Dg, path.grid)


def contributions(problem: ConditionalProblem, model: ModelSpec, path: EulerPath,
                  route: str = "auto") -> tuple[Array, Array]:
    """Paired per-path (E1, E2) contributions sharing one S(u) evaluation.

    ``route`` is "closed", "generic" or "auto" (closed when available).
    """
    if route not in ("auto", "closed", "generic"):
        raise ContractError(f"unknown route {route!r}")
    if route == "closed" or (route == "auto" and problem.closed is not None):
        if problem.closed is None:
            raise ContractError("problem has no closed-form contributions")
        return problem.closed(model, path)
    D = malliavin_state(path, model)
    if problem.weight is not None:
        u = problem.weight(model, path.grid)
    else:
        u = default_weight(malliavin_functional(problem.g, path, D, model, use_closed=False), path.grid)
    S = skorohod_adapted(u, path)
    Dl = malliavin_functional(problem.ell, path, D, model, use_closed=False)
    ind = problem.g.value(model, path) > 0
    e1 = np.where(ind, problem.ell.value(model, path) * S - weighted_time_integral(Dl, u, path.grid), 0.0)
    e2 = np.where(ind, S, 0.0)
    return e1, e2


def conditional_functional(problem: ConditionalProblem, route: str = "auto"):
    """Path functional returning the stacked (C1, C2) values, shape (n, 2)."""

    def C(model: ModelSpec, path: EulerPath) -> Array:
        e1, e2 = contributions(problem, model, path, route)
        return np.stack([e1, e2], axis=-1)

    return C


@dataclass(frozen=True, eq=False)
class RatioEstimate:
    """E1/E2 with a delta-method interval from the paired per-path covariance."""

    joint: JointStats
    blocks: tuple = field(default=())

    @property
    def num(self) -> EstimatorStats:
        return self.joint.marginal(0)

    @property
    def den(self) -> EstimatorStats:
        return self.joint.marginal(1)

    @property
    def n(self) -> int:
        return self.joint.n

    @property
    def value(self) -> float:
        return float(self.joint.mean[0] / self.joint.mean[1])

    @property
    def stderr(self) -> float:
        a, b = self.joint.mean
        return self.joint.delta_stderr([1.0 / b, -a / (b * b)])

    @property
    def half_width(self) -> float:
        return Z95 * self.stderr

    @property
    def ci95(self) -> tuple[float, float]:
        h = self.half_width
        return (self.value - h, self.value + h)

    def guard_ok(self, sigmas: float = GUARD_SIGMAS) -> bool:
        den = self.den
        return abs(den.mean) > max(sigmas * den.stderr, GUARD_FLOOR)

    def check_guard(self, sigmas: float = GUARD_SIGMAS) -> "RatioEstimate":
        if not self.guard_ok(sigmas):
            den = self.den
            raise IllConditionedError(
                f"denominator {den.mean:.4g} is within {sigmas:g} standard errors "
                f"({den.stderr:.4g}) of zero; the conditioning event is too far in the tail "
                "for this sample size",
                {"n": den.n, "den_mean": den.mean, "den_stderr": den.stderr,
                 "num_mean": self.num.mean, "num_stderr": self.num.stderr},
            )
        return self


def estimate_L(
    model: ModelSpec,
    grid: TimeGrid,
    problem: ConditionalProblem,
    N: int,
    master_seed: int = 0,
    namespace: tuple[int, ...] = (),
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
    guard: bool = True,
    route: str = "auto",
) -> RatioEstimate:
    if N < 2:
        raise ContractError(f"estimate_L needs N >= 2, got {N}")

    def block(stream: RngStream, n: int) -> JointStats:
        path = simulate_path(model, grid, stream, n)
        e1, e2 = contributions(problem, model, path, route)
        return JointStats.from_samples(np.stack([e1, e2], axis=-1))

    parts = run_blocks(block, N, master_seed, namespace, block_size, workers)
    est = RatioEstimate(merge_all(parts), tuple(parts))
    return est.check_guard() if guard else est


def silverman_bandwidth(g_samples) -> float:
    g = np.asarray(g_samples, dtype=float)
    return float(g.size ** (-0.2) * np.std(g, ddof=1))


def kernel_baseline_L(
    model: ModelSpec,
    grid: TimeGrid,
    ell: FunctionalSpec,
    g: FunctionalSpec,
    N: int,
    bandwidth: float | None = None,
    master_seed: int = 0,
    namespace: tuple[int, ...] = (),
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
) -> RatioEstimate:
    """sum l K(g) / sum K(g) with a Gaussian kernel of standard deviation ``bandwidth``.

    Without a bandwidth, N^(-1/5) times the sample std of g is used.
    """
    if bandwidth is not None and not bandwidth > 0:
        raise ContractError(f"bandwidth must be positive, got {bandwidth}")

    def block(stream: RngStream, n: int):
        path = simulate_path(model, grid, stream, n)
        return ell.value(model, path), g.value(model, path)

    parts = run_blocks(block, N, master_seed, namespace, block_size, workers)
    lv = np.concatenate([p[0] for p in parts])
    gv = np.concatenate([p[1] for p in parts])
    h = silverman_bandwidth(gv) if bandwidth is None else float(bandwidth)
    z = gv / h
    w = np.exp(-0.5 * z * z) / (h * math.sqrt(2.0 * math.pi))
    if not np.any(w >= 1e-300):
        raise KernelStarvationError(
            f"all {gv.size} kernel weights underflowed at bandwidth {h:.3g}",
            {"n": int(gv.size), "bandwidth": h, "min_abs_g": float(np.min(np.abs(gv)))},
        )
    return RatioEstimate(JointStats.from_samples(np.stack([lv * w, w], axis=-1)))
