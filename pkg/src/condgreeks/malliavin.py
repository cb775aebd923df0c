"""Discrete Malliavin calculus on Euler paths.

Row index ``j`` of every Malliavin row refers to the Gaussian increment
``sqrt(dt) * xi_{j+1}`` over ``[t_j, t_{j+1})``. A state ``X_k`` depends on
increments ``0..k-1`` only, so ``D[j][k]`` vanishes for ``j >= k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateConstraintError, SingularTangentError
from .sde import Array, EulerPath, ModelSpec, TimeGrid, _bcast

SINGULAR_TANGENT = 1e-12


@dataclass(frozen=True, eq=False)
class TangentProcess:
    """First variation Y_k = dX_k/dX_0 and its reciprocal Z_k."""

    Y: Array
    Z: Array


def tangent(path: EulerPath, model: ModelSpec) -> TangentProcess:
    grid = path.grid
    X, xi = path.states, path.noises
    Y = np.empty_like(X)
    Y[..., 0] = 1.0
    th = model.theta
    for k in range(grid.M):
        t = grid.t(k)
        x = X[..., k]
        factor = (1.0 + grid.dt * _bcast(model.dx_drift(th, x, t), x)
                  + grid.sqrt_dt * _bcast(model.dx_diffusion(th, x, t), x) * xi[..., k])
        Y[..., k + 1] = Y[..., k] * factor
    bad = np.abs(Y) < SINGULAR_TANGENT
    if np.any(bad):
        rows = int(np.count_nonzero(np.any(bad, axis=-1))) if Y.ndim > 1 else 1
        raise SingularTangentError(f"tangent process vanished on {rows} replication(s)")
    return TangentProcess(Y, 1.0 / Y)


@dataclass(frozen=True, eq=False)
class MalliavinMatrix:
    """Lazy D[j][k] = Y_k Z_{j+1} sigma(X_j, t_j) 1{j < k}.

    ``sigma`` holds sigma(X_j, t_j) for j = 0..M-1. Columns are built on
    demand because the full (n, M, M+1) tensor is rarely needed.
    """

    Y: Array
    Z: Array
    sigma: Array

    @property
    def M(self) -> int:
        return self.sigma.shape[-1]

    def column(self, k: int) -> Array:
        """Row over j of D_{t_j} X_k, shape (..., M)."""
        j = np.arange(self.M)
        weight = self.Z[..., 1:] * self.sigma
        return np.where(j < k, self.Y[..., k, None] * weight, 0.0)

    def full(self) -> Array:
        """Dense tensor of shape (..., M, M+1)."""
        return np.stack([self.column(k) for k in range(self.M + 1)], axis=-1)


def malliavin_state(path: EulerPath, model: ModelSpec, tan: TangentProcess | None = None) -> MalliavinMatrix:
    tan = tangent(path, model) if tan is None else tan
    grid = path.grid
    sig = np.empty(path.noises.shape)
    for j in range(grid.M):
        x = path.states[..., j]
        sig[..., j] = _bcast(model.diffusion(model.theta, x, grid.t(j)), x)
    return MalliavinMatrix(tan.Y, tan.Z, sig)


@dataclass(frozen=True)
class FunctionalSpec:
    """A real path functional together with its Malliavin row.

    ``value(model, path)`` evaluates the functional. ``row(model, path, D)``
    returns D_{t_j} f over j via the chain rule; ``closed_row(model, path)``
    optionally bypasses the generic route with an exact formula.
    """

    value: Callable[[ModelSpec, EulerPath], Array]
    row: Callable[[ModelSpec, EulerPath, MalliavinMatrix], Array]
    closed_row: Callable[[ModelSpec, EulerPath], Array] | None = None
    name: str = "f"


def node_functional(nodes: Sequence[int], phi, grad_phi, name: str = "f") -> FunctionalSpec:
    """f = phi(X_{k_1}, ..., X_{k_r}); ``grad_phi`` returns the r partials.

    Both callables receive the selected node values as separate arrays.
    """
    nodes = tuple(int(k) for k in nodes)

    def value(model, path):
        return np.asarray(phi(*(path.states[..., k] for k in nodes)), dtype=float)

    def row(model, path, D):
        grads = grad_phi(*(path.states[..., k] for k in nodes))
        out = np.zeros(path.noises.shape)
        for k, gk in zip(nodes, grads):
            out = out + np.asarray(gk, dtype=float)[..., None] * D.column(k)
        return out

    return FunctionalSpec(value, row, name=name)


def state_functional(k: int, level: float = 0.0, name: str = "g") -> FunctionalSpec:
    """f = X_k - level."""
    return node_functional([k], lambda x: x - level, lambda x: (np.ones_like(x),), name=name)


def integral_functional(gamma, dgamma, level: float = 0.0, name: str = "g") -> FunctionalSpec:
    """f = sum_k gamma(X_k) dt - level over k = 0..M-1 (left Riemann sum).

    Experimental: no oracle validates this route beyond the chain-rule tests.
    """

    def value(model, path):
        X = path.states[..., :-1]
        return np.sum(gamma(X), axis=-1) * path.grid.dt - level

    def row(model, path, D):
        full = D.full()[..., :-1]
        dg = np.asarray(dgamma(path.states[..., :-1]), dtype=float)
        return np.einsum("...jk,...k->...j", full, dg) * path.grid.dt

    return FunctionalSpec(value, row, name=name)


def constant_functional(c: float, name: str = "const") -> FunctionalSpec:
    return FunctionalSpec(
        lambda model, path: np.full(path.states.shape[:-1], float(c)),
        lambda model, path, D: np.zeros(path.noises.shape),
        lambda model, path: np.zeros(path.noises.shape),
        name=name,
    )


def malliavin_functional(
    f: FunctionalSpec,
    path: EulerPath,
    D: MalliavinMatrix | None,
    model: ModelSpec,
    use_closed: bool = True,
) -> Array:
    """Malliavin row of ``f``; kinks use the convention d/dx x^+ = 0 at x = 0."""
    if use_closed and f.closed_row is not None:
        return np.broadcast_to(f.closed_row(model, path), path.noises.shape)
    if D is None:
        D = malliavin_state(path, model)
    return f.row(model, path, D)


@dataclass(frozen=True, eq=False)
class WeightProcess:
    values: Array
    adapted: bool


def default_weight(Dg, grid: TimeGrid) -> WeightProcess:
    """u_k = Dg_k / (sum_j Dg_j^2 dt), which makes sum_k Dg_k u_k dt = 1.

    ``Dg`` must be deterministic: a single row, or a batch of identical rows.
    """
    Dg = np.asarray(Dg, dtype=float)
    if Dg.ndim > 1:
        ref = Dg.reshape(-1, Dg.shape[-1])[0]
        scale = max(float(np.max(np.abs(ref))), 1.0)
        if np.max(np.abs(Dg - ref)) > 1e-12 * scale:
            raise ContractError(
                "default weight needs a deterministic constraint derivative; "
                "supply an adapted weight process explicitly"
            )
        Dg = ref
    if Dg.shape[-1] != grid.M:
        raise ContractError(f"Malliavin row has length {Dg.shape[-1]}, grid has M={grid.M}")
    scale = float(np.max(np.abs(Dg)))
    if scale == 0.0:
        raise DegenerateConstraintError("constraint has zero Malliavin derivative on the whole grid")
    # Normalising by the largest entry first keeps constant rows exact.
    v = Dg / scale
    energy = math.fsum(v * v) * grid.dt
    return WeightProcess(v / (energy * scale), adapted=True)


def _xdot(a, b) -> Array:
    # Extended-precision accumulation; closed forms and the generic route then
    # agree to the last bit or so.
    prod = np.asarray(a, dtype=np.longdouble) * np.asarray(b, dtype=np.longdouble)
    return np.sum(prod, axis=-1)


def skorohod_adapted(u: WeightProcess, path: EulerPath) -> Array:
    """Ito sum sum_k u_k sqrt(dt) xi_{k+1}."""
    if not u.adapted:
        raise ContractError("skorohod_adapted requires an adapted weight; use skorohod_expand")
    return _xdot(u.values, path.increments).astype(float)


def weighted_time_integral(row, u: WeightProcess, grid: TimeGrid) -> Array:
    """Left Riemann sum sum_k row_k u_k dt."""
    return (_xdot(row, u.values) * grid.dt).astype(float)


def skorohod_expand(F, DF, u: WeightProcess, path: EulerPath) -> Array:
    """S(F u) = F S(u) - sum_k DF_k u_k dt for adapted u."""
    return np.asarray(F) * skorohod_adapted(u, path) - weighted_time_integral(DF, u, path.grid)
