"""Empirical covering numbers of the unit ball: clustering vs sparse regression.

For each codebook size ``m`` on a grid we measure the worst distance from a
set of test points to their approximation. Clustering approximates a point
by its nearest center; sparse regression by ``Z w`` with ``w`` from ISTA
over ``m`` random codes. ``m*`` is the first grid size whose worst error is
below ``delta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .quantizers import squared_distances
from .solvers import default_step, ista_solve_batch

METHODS = ("clustering", "sparse_regression")


@dataclass(frozen=True)
class CoveringSpec:
    dim: int = 2
    delta: float = 0.5
    test_points: int = 2000
    grid: tuple = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512)
    lam: float = 1e-4
    eta: float | None = None
    max_iters: int = 2000
    method: str = "clustering"
    restarts: int = 5
    kmeans_iters: int = 100
    polish_iters: int = 300
    stop_at_first: bool = False

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown covering method {self.method!r}; expected one of {METHODS}")
        if not self.grid:
            raise ConfigError("codebook-size grid is empty")
        if any(m < 1 for m in self.grid) or list(self.grid) != sorted(self.grid):
            raise ConfigError("codebook-size grid must be positive and ascending")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.dim < 1 or self.test_points < 1:
            raise ConfigError("dim and test_points must be positive")
        if self.restarts < 1 or self.kmeans_iters < 1 or self.max_iters < 1:
            raise ConfigError("restarts and iteration caps must be positive")


def sample_unit_ball(n, d, rng):
    """Uniform samples from the closed unit ball in ``R^d``."""
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / d)
    return g * r[:, None]


def covering_error(points, centers) -> float:
    d2 = squared_distances(points, centers)
    return float(np.sqrt(max(d2.min(axis=1).max(), 0.0)))


def kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = points[idx]
        closest = np.minimum(closest, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(points, k, rng, iters=100):
    """Lloyd iterations from k-means++ seeding; empty clusters take the worst-fit point."""
    centers = kmeans_pp_init(points, k, rng)
    labels = None
    for _ in range(iters):
        d2 = squared_distances(points, centers)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        empty = counts == 0
        centers[~empty] = sums[~empty] / counts[~empty, None]
        if empty.any():
            worst = np.argsort(d2[np.arange(len(points)), labels])[::-1]
            centers[empty] = points[worst[:empty.sum()]]
    return centers


def minimax_polish(points, centers, iters=300):
    """Move each center toward the minimum enclosing ball of its cluster.

    Badoiu-Clarkson steps: shift the center a ``1/(i+1)`` fraction toward its
    farthest member, reassigning points to their nearest center every ten
    steps. The best worst-case error seen is kept.
    """
    best = centers.copy()
    best_err = covering_error(points, centers)
    if iters < 1:
        return best, best_err
    labels = squared_distances(points, centers).argmin(axis=1)
    c = centers.copy()
    for i in range(1, iters + 1):
        dist = ((points - c[labels]) ** 2).sum(axis=1)
        order = np.lexsort((dist, labels))
        last = np.r_[np.nonzero(np.diff(labels[order]))[0], len(order) - 1]
        far = order[last]
        owner = labels[far]
        c[owner] += (points[far] - c[owner]) / (i + 1)
        if i % 10 == 0 or i == iters:
            d2 = squared_distances(points, c)
            labels = d2.argmin(axis=1)
            err = float(np.sqrt(max(d2.min(axis=1).max(), 0.0)))
            if err < best_err:
                best, best_err = c.copy(), err
    return best, best_err


def clustering_error(points, m, spec: CoveringSpec, rng) -> float:
    m = min(m, len(points))
    best = np.inf
    for _ in range(spec.restarts):
        centers = kmeans(points, m, rng, spec.kmeans_iters)
        _, err = minimax_polish(points, centers, spec.polish_iters)
        best = min(best, err)
    return best


def sparse_regression_error(points, m, spec: CoveringSpec, rng) -> float:
    Z = sample_unit_ball(m, spec.dim, rng).T  # d x m, codes are columns
    eta = default_step(Z) if spec.eta is None else spec.eta
    W, _ = ista_solve_batch(Z, points, spec.lam, eta, spec.max_iters, tol=1e-10, nonneg=False)
    r = points - W @ Z.T
    return float(np.sqrt((r ** 2).sum(axis=1).max()))


def codes_needed(spec: CoveringSpec, rng, points=None):
    """Return ``(m_star or None, [(m, error), ...])``.

    ``points`` defaults to ``spec.test_points`` fresh unit-ball samples;
    pass the same array to compare methods on identical test points.
    """
    spec.validate()
    if points is None:
        points = sample_unit_ball(spec.test_points, spec.dim, rng)
    measure = clustering_error if spec.method == "clustering" else sparse_regression_error
    table = []
    m_star = None
    for m in spec.grid:
        err = measure(points, m, spec, rng)
        table.append((m, err))
        if m_star is None and err < spec.delta:
            m_star = m
            if spec.stop_at_first:
                break
    return m_star, table


def lower_bound(delta, dim) -> int:
    """Volume bound on the number of ``delta``-balls covering the unit ball."""
    return int(np.ceil((1.0 / delta) ** dim - 1e-9))
