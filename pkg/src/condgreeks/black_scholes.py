"""Stressed European call under Black-Scholes, in log-price coordinates.

    dX = (r - theta^2 / 2) dt + theta dW,   X_0 = log S0
    l(X) = exp(-rT) (exp(X_T) - K)^+,   g(X) = X_{T/2} - log s

The conditional price E[l | S_{T/2} = s] has the closed form
exp(-rT/2) C_BS(s, K, r, theta, T/2), which serves as the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .conditional import ConditionalProblem
from .errors import ConfigError
from .malliavin import FunctionalSpec, WeightProcess, node_functional, state_functional
from .sde import EulerPath, ModelSpec, TimeGrid, build_grid


@dataclass(frozen=True)
class BsConfig:
    S0: float = 100.0
    r: float = 0.05
    theta: float = 0.2
    T: float = 1.0
    K: float = 95.0
    s: float = 90.0
    M: int = 64

    def __post_init__(self):
        for name in ("S0", "theta", "T", "s"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"bs.{name} must be positive, got {getattr(self, name)!r}")
        for name in ("r", "K"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"bs.{name} must be non-negative, got {getattr(self, name)!r}")

    @property
    def x0(self) -> float:
        return math.log(self.S0)

    def grid(self) -> TimeGrid:
        return build_grid(self.T, self.M, require_even=True)


def bs_model(cfg: BsConfig) -> ModelSpec:
    r = cfg.r
    return ModelSpec(
        drift=lambda th, x, t: r - 0.5 * th * th,
        diffusion=lambda th, x, t: th,
        dx_drift=lambda th, x, t: 0.0,
        dx_diffusion=lambda th, x, t: 0.0,
        dtheta_drift=lambda th, x, t: -th,
        dtheta_diffusion=lambda th, x, t: 1.0,
        theta=cfg.theta,
        x0=cfg.x0,
        name="bs-log",
    )


def _payoff(cfg: BsConfig, grid: TimeGrid) -> FunctionalSpec:
    disc = math.exp(-cfg.r * cfg.T)
    K = cfg.K

    def phi(x):
        return disc * np.maximum(np.exp(x) - K, 0.0)

    def grad(x):
        ST = np.exp(x)
        return (disc * np.where(ST > K, ST, 0.0),)

    base = node_functional([grid.M], phi, grad, name="call")

    def closed_row(model, path):
        ST = np.exp(path.states[..., -1])
        val = disc * np.where(ST > K, model.theta * ST, 0.0)
        return np.broadcast_to(val[..., None], path.noises.shape)

    return FunctionalSpec(base.value, base.row, closed_row, "call")


def _constraint(cfg: BsConfig, grid: TimeGrid) -> FunctionalSpec:
    mid = grid.mid
    base = state_functional(mid, math.log(cfg.s), name="stress")

    def closed_row(model, path):
        row = np.where(np.arange(grid.M) < mid, model.theta, 0.0)
        return np.broadcast_to(row, path.noises.shape)

    return FunctionalSpec(base.value, base.row, closed_row, "stress")


def bs_weight(model: ModelSpec, grid: TimeGrid) -> WeightProcess:
    """u = 2/(theta T) on the first half of the grid, 0 afterwards."""
    u = np.where(np.arange(grid.M) < grid.mid, 2.0 / (model.theta * grid.T), 0.0)
    return WeightProcess(u, adapted=True)


@dataclass(frozen=True)
class BsFunctionals:
    ell: FunctionalSpec
    g: FunctionalSpec
    problem: ConditionalProblem
    generic: ConditionalProblem


def bs_functionals(cfg: BsConfig, grid: TimeGrid | None = None) -> BsFunctionals:
    grid = cfg.grid() if grid is None else grid
    grid.mid  # odd M -> ConfigError
    ell = _payoff(cfg, grid)
    g = _constraint(cfg, grid)
    disc = math.exp(-cfg.r * cfg.T)
    log_s = math.log(cfg.s)
    mid = grid.mid
    K = cfg.K

    def closed(model: ModelSpec, path: EulerPath):
        X = path.states
        W_half = np.sum(path.increments[..., :mid].astype(np.longdouble), axis=-1)
        S = (2.0 / (model.theta * grid.T) * W_half).astype(float)
        ST = np.exp(X[..., -1])
        ind = X[..., mid] > log_s
        payoff = disc * np.maximum(ST - K, 0.0)
        correction = disc * np.where(ST > K, ST, 0.0)
        return np.where(ind, payoff * S - correction, 0.0), np.where(ind, S, 0.0)

    problem = ConditionalProblem(ell, g, weight=bs_weight, closed=closed)
    generic = ConditionalProblem(
        FunctionalSpec(ell.value, ell.row, None, ell.name),
        FunctionalSpec(g.value, g.row, None, g.name),
    )
    return BsFunctionals(ell, g, problem, generic)


def bs_call(S, K, r, sigma, tau):
    """Black-Scholes call price; handles K = 0 and the sigma -> 0 limit."""
    S, K = float(S), float(K)
    if K <= 0:
        return S
    vol = sigma * math.sqrt(tau)
    fwd_k = K * math.exp(-r * tau)
    if vol <= 0:
        return max(S - fwd_k, 0.0)
    d1 = (math.log(S / K) + (r + 0.5 * sigma * sigma) * tau) / vol
    d2 = d1 - vol
    return S * norm.cdf(d1) - fwd_k * norm.cdf(d2)


def bs_vega(S, K, r, sigma, tau):
    if K <= 0:
        return 0.0
    vol = sigma * math.sqrt(tau)
    d1 = (math.log(S / K) + (r + 0.5 * sigma * sigma) * tau) / vol
    return S * norm.pdf(d1) * math.sqrt(tau)


def bs_oracle_price(cfg: BsConfig) -> float:
    half = 0.5 * cfg.T
    return math.exp(-cfg.r * half) * bs_call(cfg.s, cfg.K, cfg.r, cfg.theta, half)


def bs_oracle_vega(cfg: BsConfig) -> float:
    half = 0.5 * cfg.T
    return math.exp(-cfg.r * half) * bs_vega(cfg.s, cfg.K, cfg.r, cfg.theta, half)


def mid_density(cfg: BsConfig) -> float:
    """Density of X_{T/2} at log s; the target of the E2 estimator."""
    half = 0.5 * cfg.T
    mean = cfg.x0 + (cfg.r - 0.5 * cfg.theta ** 2) * half
    sd = cfg.theta * math.sqrt(half)
    return float(norm.pdf(math.log(cfg.s), mean, sd))


def mid_density_dtheta(cfg: BsConfig) -> float:
    """d/dtheta of :func:`mid_density`, i.e. the exact value of dE2/dtheta."""
    half = 0.5 * cfg.T
    y = math.log(cfg.s)
    mean = cfg.x0 + (cfg.r - 0.5 * cfg.theta ** 2) * half
    sd = cfg.theta * math.sqrt(half)
    z = (y - mean) / sd
    dmean = -cfg.theta * half
    dsd = math.sqrt(half)
    return mid_density(cfg) * (z / sd * dmean + (z * z - 1.0) / sd * dsd)


def restart_mc_price(cfg: BsConfig, n: int, rng: np.random.Generator, chunk: int = 1_000_000):
    """Direct MC of exp(-rT)(S_T - K)^+ with S_{T/2} pinned to s.

    Only the second half of the horizon is simulated. Returns (mean, stderr).
    """
    half = 0.5 * cfg.T
    disc = math.exp(-cfg.r * cfg.T)
    drift = (cfg.r - 0.5 * cfg.theta ** 2) * half
    vol = cfg.theta * math.sqrt(half)
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        ST = cfg.s * np.exp(drift + vol * rng.standard_normal(m))
        pay = disc * np.maximum(ST - cfg.K, 0.0)
        total += float(pay.sum())
        total_sq += float((pay * pay).sum())
        done += m
    mean = total / n
    var = (total_sq - n * mean * mean) / (n - 1)
    return mean, math.sqrt(var / n)
