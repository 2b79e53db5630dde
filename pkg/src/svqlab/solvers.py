"""Exact solvers for nonnegative / signed lasso code assignment.

Solves ``min_w 0.5 * ||x - Z w||^2 + lam * ||w||_1`` where the columns of
``Z`` are codes, optionally constrained to ``w >= 0``. ISTA, FISTA and the
single proximal step from ``w = 0`` share one gradient-step helper so the
one-step weights agree with one ISTA iteration bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParameterError, ShapeError


def soft_threshold(a, t):
    if t < 0:
        raise ParameterError(f"threshold must be nonnegative, got {t}")
    return _soft(np.asarray(a, dtype=np.float64), t)


def nonneg_threshold(a, t):
    if t < 0:
        raise ParameterError(f"threshold must be nonnegative, got {t}")
    return _nonneg(np.asarray(a, dtype=np.float64), t)


def _soft(a, t):
    return np.sign(a) * np.maximum(np.abs(a) - t, 0.0)


def _nonneg(a, t):
    return np.maximum(a - t, 0.0)


def _prox(a, t, nonneg):
    return nonneg_threshold(a, t) if nonneg else soft_threshold(a, t)


def gram_spectral_norm(Z, iters=20) -> float:
    """Largest eigenvalue of ``Z^T Z`` by power iteration from a fixed start."""
    Z = np.asarray(Z, dtype=np.float64)
    m = Z.shape[1]
    v = np.ones(m) + 1e-3 * np.arange(m)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        u = Z.T @ (Z @ v)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        est = float(v @ u)
        v = u / norm
    return max(est, float(np.linalg.norm(Z.T @ (Z @ v))))


def default_step(Z) -> float:
    sigma = gram_spectral_norm(Z)
    return 0.9 / sigma if sigma > 0 else 1.0


@dataclass
class SparseRegressionProblem:
    Z: np.ndarray
    x: np.ndarray
    lam: float = 0.1
    eta: float | None = None
    nonneg: bool = True

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        if self.Z.ndim != 2:
            raise ShapeError(f"codebook must be d x m, got shape {self.Z.shape}")
        if self.Z.shape[0] != self.x.shape[0]:
            raise ShapeError(f"codebook rows {self.Z.shape[0]} != target length {self.x.shape[0]}")
        if min(self.Z.shape) < 1:
            raise ShapeError("codebook needs d, m >= 1")
        if not np.all(np.isfinite(self.Z)):
            raise ParameterError("codebook contains non-finite entries")
        if self.lam < 0:
            raise ParameterError(f"lambda must be nonnegative, got {self.lam}")
        if self.eta is None:
            self.eta = default_step(self.Z)
        if self.eta <= 0:
            raise ParameterError(f"step size must be positive, got {self.eta}")


@dataclass
class SolverReport:
    w: np.ndarray
    objective_trace: list = field(default_factory=list)  # entry 0 is the starting point
    iterations: int = 0
    converged: bool = False


def reconstruct(Z, w):
    Z = np.asarray(Z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if Z.shape[1] != w.shape[-1]:
        raise ShapeError(f"weights of length {w.shape[-1]} do not match {Z.shape[1]} codes")
    return Z @ w if w.ndim == 1 else w @ Z.T


def objective(Z, x, w, lam) -> float:
    r = np.asarray(x, dtype=np.float64) - reconstruct(Z, w)
    return 0.5 * float(r @ r) + lam * float(np.abs(w).sum())


def _gradient_step(Z, x, w, eta):
    return w - eta * (Z.T @ (Z @ w - x))


def _diverged(eta, Z):
    bound = 1.0 / max(gram_spectral_norm(Z), 1e-300)
    return DivergenceError(
        f"iterates became non-finite with step {eta:.4g}; the step must not exceed "
        f"1/sigma_max(Z^T Z) = {bound:.4g}")


# overflow is expected when the step is too large; the non-finite check reports it
@np.errstate(over="ignore", invalid="ignore")
def ista_solve(p: SparseRegressionProblem, max_iters=1000, tol=1e-8, w0=None) -> SolverReport:
    if max_iters < 1:
        raise ParameterError("max_iters must be at least 1")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    Z, x, eta, lam = p.Z, p.x, p.eta, p.lam
    w = np.zeros(Z.shape[1]) if w0 is None else np.array(w0, dtype=np.float64)
    if w.shape != (Z.shape[1],):
        raise ShapeError(f"start point of shape {w.shape} does not match {Z.shape[1]} codes")
    prox = _nonneg if p.nonneg else _soft
    # one residual per iterate serves both the objective and the next gradient
    r = Z @ w - x
    trace = [0.5 * float(r @ r) + lam * float(np.abs(w).sum())]
    report = SolverReport(w=w, objective_trace=trace)
    for it in range(1, max_iters + 1):
        w_next = prox(w - eta * (Z.T @ r), lam * eta)
        if not np.isfinite(w_next).all():
            raise _diverged(eta, Z)
        change = float(np.abs(w_next - w).max())
        w = w_next
        r = Z @ w - x
        trace.append(0.5 * float(r @ r) + lam * float(np.abs(w).sum()))
        report.iterations = it
        if change < tol:
            report.converged = True
            break
    report.w = w
    return report


# overflow is expected when the step is too large; the non-finite check reports it
@np.errstate(over="ignore", invalid="ignore")
def fista_solve(p: SparseRegressionProblem, max_iters=1000, tol=1e-8, w0=None) -> SolverReport:
    if max_iters < 1:
        raise ParameterError("max_iters must be at least 1")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    Z, x, eta = p.Z, p.x, p.eta
    w = np.zeros(Z.shape[1]) if w0 is None else np.array(w0, dtype=np.float64)
    y = w.copy()
    t = 1.0
    report = SolverReport(w=w, objective_trace=[objective(Z, x, w, p.lam)])
    for it in range(1, max_iters + 1):
        w_next = _prox(_gradient_step(Z, x, y, eta), p.lam * eta, p.nonneg)
        if not np.all(np.isfinite(w_next)):
            raise _diverged(eta, Z)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = w_next + ((t - 1.0) / t_next) * (w_next - w)
        change = float(np.max(np.abs(w_next - w)))
        w, t = w_next, t_next
        report.objective_trace.append(objective(Z, x, w, p.lam))
        report.iterations = it
        if change < tol:
            report.converged = True
            break
    report.w = w
    return report


def one_step_weights(Z, x, lam, eta, nonneg=True):
    """Weights after one proximal-gradient step from ``w = 0``."""
    p = SparseRegressionProblem(Z, x, lam, eta, nonneg)
    w0 = np.zeros(p.Z.shape[1])
    return _prox(_gradient_step(p.Z, p.x, w0, p.eta), p.lam * p.eta, p.nonneg)


# overflow is expected when the step is too large; the non-finite check reports it
@np.errstate(over="ignore", invalid="ignore")
def ista_solve_batch(Z, X, lam, eta=None, max_iters=1000, tol=1e-8, nonneg=True):
    """ISTA on every row of ``X`` at once; rows freeze individually on convergence.

    Returns ``(W, iterations)`` with ``W`` of shape ``[B, m]``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != Z.shape[0]:
        raise ShapeError(f"tokens of dim {X.shape[1]} do not match codebook rows {Z.shape[0]}")
    if lam < 0:
        raise ParameterError(f"lambda must be nonnegative, got {lam}")
    eta = default_step(Z) if eta is None else eta
    if eta <= 0:
        raise ParameterError(f"step size must be positive, got {eta}")
    d, m = Z.shape
    # large codebooks: W Z^T Z costs 2dm per row instead of m^2
    factored = m > 2 * d
    gram = None if factored else Z.T @ Z
    zx = X @ Z
    W = np.zeros((X.shape[0], m))
    iters = np.zeros(X.shape[0], dtype=np.int64)
    active = np.arange(X.shape[0])
    for it in range(1, max_iters + 1):
        Wa = W[active]
        grad = ((Wa @ Z.T) @ Z if factored else Wa @ gram) - zx[active]
        nxt = _prox(Wa - eta * grad, lam * eta, nonneg)
        if not np.all(np.isfinite(nxt)):
            raise _diverged(eta, Z)
        change = np.max(np.abs(nxt - Wa), axis=1)
        W[active] = nxt
        iters[active] = it
        active = active[change >= tol]
        if active.size == 0:
            break
    return W, iters


def svq_raw_quantize(tokens, Z, lam, eta=None, iters=100, nonneg=False, tol=1e-8):
    """Quantize each token by solving its own lasso problem, then reconstructing."""
    if iters < 1:
        raise ParameterError("iters must be at least 1")
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    Z = np.asarray(Z, dtype=np.float64)
    if tokens.shape[1] != Z.shape[0]:
        raise ShapeError(f"tokens of dim {tokens.shape[1]} do not match codebook rows {Z.shape[0]}")
    eta = default_step(Z) if eta is None else eta
    weights = np.zeros((tokens.shape[0], Z.shape[1]))
    for b, x in enumerate(tokens):
        weights[b] = ista_solve(SparseRegressionProblem(Z, x, lam, eta, nonneg), iters, tol).w
    return reconstruct(Z, weights), weights


def flops_estimate(method: str, d: int, m: int, hidden: int = 128, iters: int = 1, levels: int = 1) -> int:
    """Multiply-add count (2 FLOPs each) per token.

    * ``svq_raw``: ``iters * (4*d*m + 3*m)``; per iteration two matrix-vector
      products with ``Z`` plus the elementwise update and threshold.
    * ``svq_mlp``: ``2*(d*hidden + hidden*m + m*d)``; two projections plus
      the product with the codebook (biases and ReLU ignored).
    * ``lookup``: ``levels * 2*d*m``; distance evaluation against every code.
    """
    if min(d, m) < 1:
        raise ParameterError("sizes must be positive")
    if method == "svq_raw":
        if iters < 1:
            raise ParameterError("iters must be positive")
        return iters * (4 * d * m + 3 * m)
    if method == "svq_mlp":
        if hidden < 1:
            raise ParameterError("hidden must be positive")
        return 2 * (d * hidden + hidden * m + m * d)
    if method == "lookup":
        if levels < 1:
            raise ParameterError("levels must be positive")
        return levels * 2 * d * m
    raise ParameterError(f"unknown method {method!r}")
