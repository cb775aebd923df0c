"""Scalar SDE models, time grids and Euler-Maruyama simulation.

All simulation routines are vectorised over a leading replication axis:
``states`` has shape ``(n, M + 1)`` and ``noises`` shape ``(n, M)``, where
``noises[..., k]`` is the standard normal draw that moves the chain from
node ``k`` to node ``k + 1``. A single path is the same layout without the
leading axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DegenerateKernelError, PropertyFailure

Array = np.ndarray
Coefficient = Callable[[float, Array, float], Array]

# Substream indices inside one RngStream.
NOMINAL = 0
BRANCH = 1
TAIL = 2
AUX = 3


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    @property
    def nodes(self) -> Array:
        return np.arange(self.M + 1) * self.dt

    def t(self, k: int) -> float:
        return k * self.dt

    @property
    def mid(self) -> int:
        """Index of the node at T/2; only defined on even grids."""
        if self.M % 2:
            raise ConfigError(f"grid.M={self.M} must be even so that T/2 is a grid node")
        return self.M // 2


def build_grid(T: float, M: int, require_even: bool = False) -> TimeGrid:
    if not (isinstance(T, (int, float)) and math.isfinite(T) and T > 0):
        raise ConfigError(f"grid.T must be a positive number, got {T!r}")
    if isinstance(M, bool) or not isinstance(M, (int, np.integer)) or M < 2:
        raise ConfigError(f"grid.M must be an integer >= 2, got {M!r}")
    if require_even and M % 2:
        raise ConfigError(f"grid.M={M} must be even so that T/2 is a grid node")
    return TimeGrid(float(T), int(M))


@dataclass(frozen=True)
class ModelSpec:
    """A scalar diffusion dX = b(theta, X, t) dt + sigma(theta, X, t) dW.

    Every coefficient callback takes ``(theta, x, t)`` with ``x`` a numpy
    array and must broadcast against it. The theta-derivatives are supplied
    by the user rather than differentiated automatically; use
    :func:`validate_model` to cross-check them.
    """

    drift: Coefficient
    diffusion: Coefficient
    dx_drift: Coefficient
    dx_diffusion: Coefficient
    dtheta_drift: Coefficient
    dtheta_diffusion: Coefficient
    theta: float
    x0: float
    name: str = "custom"

    def with_theta(self, theta: float) -> "ModelSpec":
        return replace(self, theta=float(theta))

    def b(self, x, t: float) -> Array:
        return _bcast(self.drift(self.theta, x, t), x)

    def sigma(self, x, t: float) -> Array:
        return _bcast(self.diffusion(self.theta, x, t), x)


def _bcast(value, x) -> Array:
    return np.broadcast_to(np.asarray(value, dtype=float), np.shape(x))


def _mean_std(model: ModelSpec, grid: TimeGrid, x, k: int):
    t = grid.t(k)
    th = model.theta
    m = x + grid.dt * _bcast(model.drift(th, x, t), x)
    s = grid.sqrt_dt * _bcast(model.diffusion(th, x, t), x)
    if np.any(~(s > 0)):
        raise DegenerateKernelError(f"non-positive diffusion at step {k} (theta={th})")
    return m, s


def kernel_params(model: ModelSpec, x, k: int, grid: TimeGrid):
    """Mean, std and their theta-derivatives of the Euler kernel at step ``k``.

    Returns ``(m, s, dm, ds)`` with m = x + dt b, s = sqrt(dt) sigma,
    dm = dt d_theta b, ds = sqrt(dt) d_theta sigma.
    """
    m, s = _mean_std(model, grid, x, k)
    t = grid.t(k)
    dm = grid.dt * _bcast(model.dtheta_drift(model.theta, x, t), x)
    ds = grid.sqrt_dt * _bcast(model.dtheta_diffusion(model.theta, x, t), x)
    return m, s, dm, ds


def _step(model: ModelSpec, grid: TimeGrid, x, k: int, xi):
    # Every state in the package is built here, so X_{k+1} = m + s * xi holds exactly.
    m, s = _mean_std(model, grid, x, k)
    return m + s * xi


@dataclass(frozen=True)
class RngStream:
    """Deterministic counter-based stream keyed by (master_seed, namespace, index).

    Each substream is an independent Philox generator, so two streams (or two
    substreams) never share draws and replaying a key reproduces them exactly.
    """

    master_seed: int
    stream_index: int
    namespace: tuple[int, ...] = ()

    def generator(self, substream: int = NOMINAL) -> np.random.Generator:
        seq = np.random.SeedSequence(
            int(self.master_seed),
            spawn_key=(*self.namespace, int(self.stream_index), int(substream)),
        )
        return np.random.Generator(np.random.Philox(seq))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_index, (*self.namespace, *keys))


@dataclass(frozen=True, eq=False)
class EulerPath:
    grid: TimeGrid
    states: Array
    noises: Array
    stream_id: tuple = field(default=())

    @property
    def n(self) -> int:
        return 1 if self.states.ndim == 1 else self.states.shape[0]

    @property
    def increments(self) -> Array:
        """Brownian increments sqrt(dt) * xi."""
        return self.grid.sqrt_dt * self.noises


def simulate_path(
    model: ModelSpec,
    grid: TimeGrid,
    stream: RngStream | None = None,
    n: int | None = None,
    noises: Array | None = None,
) -> EulerPath:
    """Simulate Euler paths; ``n=None`` gives a single path.

    ``noises`` overrides the stream (test hook and CRN reuse).
    """
    shape = (grid.M,) if n is None else (int(n), grid.M)
    if noises is None:
        if stream is None:
            raise ContractError("simulate_path needs a stream or explicit noises")
        noises = stream.generator(NOMINAL).standard_normal(shape)
    else:
        noises = np.asarray(noises, dtype=float)
        if noises.shape != shape:
            raise ContractError(f"noises shape {noises.shape} != expected {shape}")
    states = np.empty(shape[:-1] + (grid.M + 1,))
    states[..., 0] = model.x0
    for k in range(grid.M):
        states[..., k + 1] = _step(model, grid, states[..., k], k, noises[..., k])
    sid = () if stream is None else (stream.master_seed, *stream.namespace, stream.stream_index)
    return EulerPath(grid, states, noises, sid)


def propagate_from(model: ModelSpec, grid: TimeGrid, k: int, x_k, noises) -> Array:
    """Run the Euler recursion from (k, x_k) with the supplied noises verbatim.

    ``noises[..., i]`` drives step ``k + i``; returns states X_{k+1..M}.
    """
    noises = np.asarray(noises, dtype=float)
    if not 0 <= k < grid.M:
        raise ContractError(f"step index k={k} outside [0, {grid.M})")
    if noises.shape[-1] != grid.M - k:
        raise ContractError(f"expected {grid.M - k} noises from step {k}, got {noises.shape[-1]}")
    x = np.broadcast_to(np.asarray(x_k, dtype=float), noises.shape[:-1]).copy()
    out = np.empty(noises.shape)
    for i in range(grid.M - k):
        x = _step(model, grid, x, k + i, noises[..., i])
        out[..., i] = x
    return out


def repropagate(model: ModelSpec, grid: TimeGrid, states: Array, noises: Array, first_step) -> Array:
    """Row-wise re-run of the Euler recursion in place.

    For each row ``i``, steps ``j >= first_step[i]`` are recomputed from
    ``states[i, j]`` and ``noises[i, j]``; earlier nodes are left untouched.
    """
    first_step = np.asarray(first_step)
    for j in range(grid.M):
        active = j >= first_step
        if not np.any(active):
            continue
        nxt = _step(model, grid, states[:, j], j, noises[:, j])
        states[:, j + 1] = np.where(active, nxt, states[:, j + 1])
    return states


def reconstruct_noises(model: ModelSpec, grid: TimeGrid, states: Array) -> Array:
    """Invert the Euler recursion: the normals that carry ``states`` under ``model``."""
    states = np.asarray(states, dtype=float)
    out = np.empty(states.shape[:-1] + (grid.M,))
    for k in range(grid.M):
        m, s = _mean_std(model, grid, states[..., k], k)
        out[..., k] = (states[..., k + 1] - m) / s
    return out


PathFunctional = Callable[[ModelSpec, EulerPath], Array]


def as_matrix(values: Array) -> Array:
    values = np.asarray(values, dtype=float)
    return values[:, None] if values.ndim == 1 else values


def explicit_partial(model: ModelSpec, C: PathFunctional, path: EulerPath, rel_step: float = 1e-5) -> Array:
    """Central difference of C in theta with the state path held fixed.

    The driving noises are re-derived from the frozen states at each shifted
    theta, since functionals such as Ito sums depend on them.
    """
    h = rel_step * max(1.0, abs(model.theta))
    vals = []
    for th in (model.theta + h, model.theta - h):
        mod = model.with_theta(th)
        frozen = EulerPath(path.grid, path.states, reconstruct_noises(mod, path.grid, path.states))
        vals.append(np.asarray(C(mod, frozen), dtype=float))
    return (vals[0] - vals[1]) / (2.0 * h)


def validate_model(
    model: ModelSpec,
    grid: TimeGrid,
    rng: np.random.Generator | None = None,
    n_probes: int = 100,
    x_range: tuple[float, float] | None = None,
    rel_tol: float = 1e-5,
) -> dict[str, float]:
    """Cross-check every derivative callback against central finite differences.

    Returns the worst scaled error per callback; raises PropertyFailure when
    any exceeds ``rel_tol``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = x_range if x_range is not None else (model.x0 - 1.0, model.x0 + 1.0)
    xs = rng.uniform(lo, hi, n_probes)
    ks = rng.integers(0, grid.M, n_probes)
    th = model.theta
    worst = {"dx_drift": 0.0, "dx_diffusion": 0.0, "dtheta_drift": 0.0, "dtheta_diffusion": 0.0}
    for x, k in zip(xs, ks):
        t = grid.t(int(k))
        hx = 1e-6 * max(1.0, abs(x))
        ht = 1e-6 * max(1.0, abs(th))
        x_arr = np.asarray(x)
        pairs = {
            "dx_drift": (model.dx_drift(th, x_arr, t),
                         (model.drift(th, x + hx, t) - model.drift(th, x - hx, t)) / (2 * hx)),
            "dx_diffusion": (model.dx_diffusion(th, x_arr, t),
                             (model.diffusion(th, x + hx, t) - model.diffusion(th, x - hx, t)) / (2 * hx)),
            "dtheta_drift": (model.dtheta_drift(th, x_arr, t),
                             (model.drift(th + ht, x_arr, t) - model.drift(th - ht, x_arr, t)) / (2 * ht)),
            "dtheta_diffusion": (model.dtheta_diffusion(th, x_arr, t),
                                 (model.diffusion(th + ht, x_arr, t) - model.diffusion(th - ht, x_arr, t)) / (2 * ht)),
        }
        if not float(model.diffusion(th, x_arr, t)) > 0:
            raise DegenerateKernelError(f"diffusion not positive at x={x}, t={t}")
        for name, (given, fd) in pairs.items():
            err = abs(float(given) - float(fd)) / max(1.0, abs(float(fd)))
            worst[name] = max(worst[name], err)
    bad = {k: v for k, v in worst.items() if v > rel_tol}
    if bad:
        raise PropertyFailure(f"derivative callbacks disagree with finite differences: {bad}")
    return worst
