"""Conditional Greeks through the quotient rule, and the calibration loop.

With L = E1 / E2,

    dL = (E2 dE1 - E1 dE2) / E2^2,

where dE1, dE2 are gradients of the path functionals whose means are E1 and
E2. All four quantities come from the same replications, so the delta-method
interval uses their full 4x4 sample covariance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conditional import ConditionalProblem, RatioEstimate, conditional_functional, contributions
from .errors import ConfigError, ContractError, IllConditionedError
from .runner import DEFAULT_BLOCK, run_blocks
from .score import score_samples
from .sde import ModelSpec, RngStream, TimeGrid, simulate_path
from .stats import EstimatorStats, JointStats, Z95, merge_all
from .weak_derivative import BranchLaw, _drop_gate, wd_samples

log = logging.getLogger(__name__)

GRADIENT_METHODS = ("wd", "score")


def quotient_rule(E1: float, E2: float, dE1: float, dE2: float) -> float:
    return (E2 * dE1 - E1 * dE2) / (E2 * E2)


def quotient_gradient(E1: float, E2: float, dE1: float, dE2: float) -> np.ndarray:
    """Partials of :func:`quotient_rule` in (E1, E2, dE1, dE2)."""
    inv = 1.0 / E2
    return np.array([
        -dE2 * inv * inv,
        dE1 * inv * inv - 2.0 * (E2 * dE1 - E1 * dE2) * inv ** 3,
        inv,
        -E1 * inv * inv,
    ])


@dataclass(frozen=True, eq=False)
class GreekResult:
    """Joint statistics of the per-path vector (E1, E2, dE1, dE2)."""

    joint: JointStats
    method: str

    @property
    def ratio(self) -> RatioEstimate:
        j = self.joint
        return RatioEstimate(JointStats(j.n, j.mean[:2].copy(), j.comoment[:2, :2].copy()))

    @property
    def E1(self) -> EstimatorStats:
        return self.joint.marginal(0)

    @property
    def E2(self) -> EstimatorStats:
        return self.joint.marginal(1)

    @property
    def dE1(self) -> EstimatorStats:
        return self.joint.marginal(2)

    @property
    def dE2(self) -> EstimatorStats:
        return self.joint.marginal(3)

    @property
    def n(self) -> int:
        return self.joint.n

    @property
    def L(self) -> float:
        return self.ratio.value

    @property
    def L_stderr(self) -> float:
        return self.ratio.stderr

    @property
    def dL(self) -> float:
        return quotient_rule(*self.joint.mean)

    @property
    def dL_stderr(self) -> float:
        return self.joint.delta_stderr(quotient_gradient(*self.joint.mean))

    @property
    def dL_half_width(self) -> float:
        return Z95 * self.dL_stderr

    @property
    def dL_ci95(self) -> tuple[float, float]:
        h = self.dL_half_width
        return (self.dL - h, self.dL + h)


def _gradient_samples(method: str, model, C, path, stream, law):
    if method == "wd":
        return wd_samples(model, C, path, stream, law)
    if method == "score":
        est = score_samples(model, C, path)
        return est, np.zeros(path.n, dtype=bool)
    raise ConfigError(f"gradient.method must be one of {GRADIENT_METHODS}, got {method!r}")


def _joint_run(model, grid, problem, N, methods, master_seed, branch_law, namespace, block_size, workers):
    for m in methods:
        if m not in GRADIENT_METHODS:
            raise ConfigError(f"gradient.method must be one of {GRADIENT_METHODS}, got {m!r}")
    if N < 2:
        raise ContractError(f"conditional_greek needs N >= 2, got {N}")
    C = conditional_functional(problem)

    def block(stream: RngStream, n: int):
        path = simulate_path(model, grid, stream, n)
        e1, e2 = contributions(problem, model, path)
        cols = [e1, e2]
        keep = np.ones(n, dtype=bool)
        for m in methods:
            grads, dropped = _gradient_samples(m, model, C, path, stream, branch_law)
            cols.append(grads)
            keep &= ~dropped
        rows = np.column_stack(cols)[keep]
        return JointStats.from_samples(rows), int(n - keep.sum())

    parts = run_blocks(block, N, master_seed, namespace, block_size, workers)
    _drop_gate(sum(p[1] for p in parts), N)
    return merge_all([p[0] for p in parts])


def _sub(joint: JointStats, idx) -> JointStats:
    idx = np.asarray(idx)
    return JointStats(joint.n, joint.mean[idx].copy(), joint.comoment[np.ix_(idx, idx)].copy())


def conditional_greek(
    model: ModelSpec,
    grid: TimeGrid,
    problem: ConditionalProblem,
    N: int,
    method: str = "wd",
    master_seed: int = 0,
    branch_law: BranchLaw | None = None,
    namespace: tuple[int, ...] = (),
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
    guard: bool = True,
) -> GreekResult:
    """d/dtheta E[l | g = 0] from one set of paired replications.

    E1, E2 and both gradients are computed on the same nominal paths, and the
    two gradients share their branch draws.
    """
    joint = _joint_run(model, grid, problem, N, (method,), master_seed, branch_law, namespace,
                       block_size, workers)
    result = GreekResult(joint, method)
    if guard:
        result.ratio.check_guard()
    return result


@dataclass(frozen=True, eq=False)
class MethodComparison:
    """Both gradient methods on shared nominal paths.

    The joint vector is (E1, E2, dE1_wd, dE2_wd, dE1_score, dE2_score), so the
    gap between the two dL estimates gets a paired delta-method stderr.
    """

    joint: JointStats

    @property
    def wd(self) -> GreekResult:
        return GreekResult(_sub(self.joint, [0, 1, 2, 3]), "wd")

    @property
    def score(self) -> GreekResult:
        return GreekResult(_sub(self.joint, [0, 1, 4, 5]), "score")

    @property
    def gap(self) -> float:
        return self.wd.dL - self.score.dL

    @property
    def gap_stderr(self) -> float:
        E1, E2, a1, a2, b1, b2 = self.joint.mean
        ga = quotient_gradient(E1, E2, a1, a2)
        gb = quotient_gradient(E1, E2, b1, b2)
        grad = np.array([ga[0] - gb[0], ga[1] - gb[1], ga[2], ga[3], -gb[2], -gb[3]])
        return self.joint.delta_stderr(grad)

    def agree(self, k: float = 3.0) -> bool:
        return bool(abs(self.gap) <= k * self.gap_stderr)


def compare_methods(
    model: ModelSpec,
    grid: TimeGrid,
    problem: ConditionalProblem,
    N: int,
    master_seed: int = 0,
    branch_law: BranchLaw | None = None,
    namespace: tuple[int, ...] = (),
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
    guard: bool = True,
) -> MethodComparison:
    joint = _joint_run(model, grid, problem, N, ("wd", "score"), master_seed, branch_law, namespace,
                       block_size, workers)
    cmp = MethodComparison(joint)
    if guard:
        cmp.wd.ratio.check_guard()
    return cmp


@dataclass
class SgdTrace:
    step: float
    theta: list[float] = field(default_factory=list)
    L_hat: list[float] = field(default_factory=list)
    dL_hat: list[float] = field(default_factory=list)
    dL_stderr: list[float] = field(default_factory=list)
    grad: list[float] = field(default_factory=list)
    N_used: list[int] = field(default_factory=list)

    def rows(self):
        """(iter, theta, L_hat, dL_hat, dL_stderr); the last iterate has no estimate."""
        for i, th in enumerate(self.theta):
            if i < len(self.L_hat):
                yield i, th, self.L_hat[i], self.dL_hat[i], self.dL_stderr[i]
            else:
                yield i, th, math.nan, math.nan, math.nan


# objective(theta, N, namespace) -> (loss gradient, GreekResult)
Objective = Callable[[float, int, tuple], tuple[float, GreekResult]]


def calibration_objective(
    make_model: Callable[[float], ModelSpec],
    grid: TimeGrid,
    make_problem: Callable[[float], ConditionalProblem],
    target: float,
    method: str = "wd",
    master_seed: int = 0,
    branch_law: BranchLaw | None = None,
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
) -> Objective:
    """Gradient of (L(theta) - target)^2, i.e. 2 (L - target) dL."""

    def objective(theta: float, N: int, namespace: tuple) -> tuple[float, GreekResult]:
        res = conditional_greek(make_model(theta), grid, make_problem(theta), N, method, master_seed,
                                branch_law, namespace, block_size, workers)
        return float(2.0 * (res.L - target) * res.dL), res

    return objective


def sgd_minimize(
    objective: Objective,
    theta0: float,
    step: float,
    iters: int,
    N: int,
    box: tuple[float, float],
    decreasing: bool = False,
    max_retries: int = 3,
) -> SgdTrace:
    """theta <- clip(theta - eps_k * grad, box) for ``iters`` steps.

    ``eps_k = step`` or, with ``decreasing``, ``step / (k + 1)``. A guard
    failure repeats the iterate with doubled N up to ``max_retries`` times;
    after that the error is re-raised with the partial trace attached.
    """
    lo, hi = box
    if not lo < hi:
        raise ConfigError(f"sgd box must satisfy lo < hi, got {box}")
    if step < 0:
        raise ConfigError(f"sgd step must be non-negative, got {step}")
    if not lo <= theta0 <= hi:
        raise ConfigError(f"theta0={theta0} lies outside the box {box}")
    trace = SgdTrace(step, [float(theta0)])
    theta = float(theta0)
    for k in range(iters):
        n_k = int(N)
        for attempt in range(max_retries + 1):
            try:
                grad, res = objective(theta, n_k, (k, attempt))
                break
            except IllConditionedError as exc:
                if attempt == max_retries:
                    exc.diagnostics["trace"] = trace
                    raise
                log.warning("iterate %d: %s; retrying with N=%d", k, exc, 2 * n_k)
                n_k *= 2
        eps = step / (k + 1) if decreasing else step
        trace.L_hat.append(float(res.L))
        trace.dL_hat.append(float(res.dL))
        trace.dL_stderr.append(float(res.dL_stderr))
        trace.grad.append(grad)
        trace.N_used.append(n_k)
        theta = float(min(max(theta - eps * grad, lo), hi))
        trace.theta.append(theta)
    return trace
