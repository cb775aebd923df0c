"""Streaming moment accumulators with associative merging."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Z95 = 1.959963984540054


@dataclass(frozen=True)
class EstimatorStats:
    """Count, mean and sum of squared deviations of a scalar sample."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def from_samples(cls, x) -> "EstimatorStats":
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            return cls()
        mu = float(x.mean())
        return cls(int(x.size), mu, float(np.sum((x - mu) ** 2)))

    def merge(self, other: "EstimatorStats") -> "EstimatorStats":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return EstimatorStats(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else math.nan

    @property
    def stderr(self) -> float:
        return math.sqrt(self.m2 / (self.n * (self.n - 1))) if self.n > 1 else math.nan

    @property
    def ci95(self) -> tuple[float, float]:
        h = Z95 * self.stderr
        return (self.mean - h, self.mean + h)

    @property
    def half_width(self) -> float:
        return Z95 * self.stderr


@dataclass(frozen=True, eq=False)
class JointStats:
    """Vector analogue of EstimatorStats keeping the full co-moment matrix.

    Used wherever several per-path quantities are computed from the same
    replication and a delta-method interval needs their covariance.
    """

    n: int
    mean: np.ndarray
    comoment: np.ndarray

    @classmethod
    def empty(cls, k: int) -> "JointStats":
        return cls(0, np.zeros(k), np.zeros((k, k)))

    @classmethod
    def from_samples(cls, x) -> "JointStats":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] == 0:
            return cls.empty(x.shape[1])
        mu = x.mean(axis=0)
        d = x - mu
        return cls(int(x.shape[0]), mu, d.T @ d)

    def merge(self, other: "JointStats") -> "JointStats":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        com = self.comoment + other.comoment + np.outer(delta, delta) * (self.n * other.n / n)
        return JointStats(n, mean, com)

    @property
    def cov(self) -> np.ndarray:
        return self.comoment / (self.n - 1)

    def marginal(self, i: int) -> EstimatorStats:
        return EstimatorStats(self.n, float(self.mean[i]), float(self.comoment[i, i]))

    def delta_stderr(self, gradient) -> float:
        """Standard error of f(mean) given grad f evaluated at the mean."""
        g = np.asarray(gradient, dtype=float)
        var = float(g @ self.cov @ g) / self.n
        return math.sqrt(max(var, 0.0))


def merge_all(items):
    """Left fold of ``merge`` in the given order."""
    items = list(items)
    acc = items[0]
    for it in items[1:]:
        acc = acc.merge(it)
    return acc
