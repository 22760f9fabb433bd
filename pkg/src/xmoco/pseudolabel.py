"""Soft pseudo-labels with a fixed positive mass and uniform negative marginals.

The negative block is the entropic transport plan between the batch columns
(mass 1/N each) and the K negative peers (mass 1/K each), computed by a short
Sinkhorn-Knopp scaling of ``P_hat ** lambda``.  ``oracle_labels`` solves the
same problem through unrelated code paths for verification.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import logsumexp

from .matrix import MatrixError, as_mat
from .probability import ProbMatrix

FLOOR = 1e-300
DEFAULT_LAMBDA = 2.0
DEFAULT_ITERS = 3


class RelaxationWarning(UserWarning):
    """A negative label entry exceeded the fixed positive mass xi."""


@dataclass(frozen=True)
class PseudoLabelMatrix:
    y: np.ndarray
    xi: float
    lam: float
    iters: int

    @property
    def body(self) -> np.ndarray:
        """The normalized negative block ``Y_hat`` (K x N, sums to 1)."""
        n = self.y.shape[1]
        if self.xi == 1.0:
            return np.zeros_like(self.y[1:])
        return self.y[1:] / (n * (1.0 - self.xi))


def _probs(p) -> np.ndarray:
    return p.p if isinstance(p, ProbMatrix) else as_mat(p)


def _check_xi(xi: float, k: int) -> None:
    if not (1.0 / (k + 1) - 1e-15 <= xi <= 1.0):
        raise MatrixError(f"xi={xi} outside [1/(K+1), 1] for K={k}")


def _kernel(p: np.ndarray, lam: float) -> np.ndarray:
    """Normalized ``(P[1:]/N) ** lambda`` with the underflow floor."""
    n = p.shape[1]
    y = np.maximum(np.power(p[1:] / n, lam), FLOOR)
    return y / y.sum()


def sinkhorn_sweeps(p, lam: float, iters: int):
    """Yield the pre-assembly iterate after each half-step (row, column, ...)."""
    p = _probs(p)
    k, n = p.shape[0] - 1, p.shape[1]
    y = _kernel(p, lam)
    yield y.copy()
    for _ in range(iters):
        y = y / (y.sum(axis=1, keepdims=True) * k)
        yield y.copy()
        y = y / (y.sum(axis=0, keepdims=True) * n)
        yield y.copy()


def assemble(y_hat: np.ndarray, xi: float, lam: float, iters: int) -> PseudoLabelMatrix:
    n = y_hat.shape[1]
    body = (n * (1.0 - xi)) * y_hat
    y = np.vstack([np.full((1, n), float(xi)), body])
    if body.size and body.max() > xi:
        warnings.warn(
            f"negative pseudo-label {body.max():.4g} exceeds xi={xi}; positive-peer "
            "dominance holds only on average",
            RelaxationWarning,
            stacklevel=3,
        )
    return PseudoLabelMatrix(y=y, xi=float(xi), lam=float(lam), iters=int(iters))


def sinkhorn_labels(p, xi: float, lam: float = DEFAULT_LAMBDA, iters: int = DEFAULT_ITERS) -> PseudoLabelMatrix:
    """Pseudo-labels from a probability matrix; p is treated as a constant.

    Strips the positive row, raises ``P_hat = P[1:]/N`` to the power ``lam``,
    then alternates row scaling (sum 1/K) and column scaling (sum 1/N)
    ``iters`` times.  The result is ``[xi ; N (1 - xi) Y_hat]``, so every
    column sums to one.
    """
    p = _probs(p)
    if p.shape[0] < 2:
        raise MatrixError("need at least one negative peer")
    if not lam > 0:
        raise MatrixError(f"lambda must be > 0, got {lam}")
    if iters < 1:
        raise MatrixError(f"iters must be >= 1, got {iters}")
    k, n = p.shape[0] - 1, p.shape[1]
    _check_xi(xi, k)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise MatrixError("log-domain violation: probabilities must be finite and > 0")
    y = _kernel(p, lam)
    for _ in range(iters):
        y /= y.sum(axis=1, keepdims=True) * k
        y /= y.sum(axis=0, keepdims=True) * n
    return assemble(y, xi, lam, iters)


def one_hot_labels(k_plus_one: int, n: int) -> PseudoLabelMatrix:
    if k_plus_one < 1 or n < 1:
        raise MatrixError("dimensions must be >= 1")
    y = np.zeros((k_plus_one, n))
    y[0] = 1.0
    return PseudoLabelMatrix(y=y, xi=1.0, lam=float("nan"), iters=0)


def transport_objective(y_hat, p, lam: float) -> float:
    """``<Y_hat, -log P_hat> - H(Y_hat)/lambda`` with ``P_hat = P[1:]/N``."""
    p = _probs(p)
    y_hat = as_mat(y_hat)
    cost = -np.log(p[1:] / p.shape[1])
    pos = y_hat > 0
    neg_entropy = float(np.sum(y_hat[pos] * np.log(y_hat[pos])))
    return float(np.sum(y_hat * cost)) + neg_entropy / lam


# -- independent solver ------------------------------------------------------

ORACLE_MAX_CELLS = 16


def _oracle_two_by_two(cost: np.ndarray, lam: float) -> np.ndarray:
    # Polytope {[[t, 1/2 - t], [1/2 - t, t]] : 0 <= t <= 1/2}.
    def f(t):
        y = np.array([[t, 0.5 - t], [0.5 - t, t]])
        y = np.clip(y, 1e-300, None)
        return float(np.sum(y * cost) + np.sum(y * np.log(y)) / lam)

    res = minimize_scalar(f, bounds=(0.0, 0.5), method="bounded", options={"xatol": 1e-13, "maxiter": 2000})
    t = float(res.x)
    return np.array([[t, 0.5 - t], [0.5 - t, t]])


def _oracle_two_rows(kernel: np.ndarray) -> np.ndarray:
    # Optimal plan is diag(a) G diag(b); with column sums fixed at 1/N the only
    # free quantity is the ratio a1/a2 = exp(s), found so that row 0 sums to 1/2.
    n = kernel.shape[1]
    lu = np.log(kernel[0]) - np.log(kernel[1])

    def top(s):
        return np.sum(1.0 / (1.0 + np.exp(-(s + lu)))) / n

    lo, hi = -np.max(lu) - 50.0, -np.min(lu) + 50.0
    s = brentq(lambda s: top(s) - 0.5, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    frac = 1.0 / (1.0 + np.exp(-(s + lu)))
    return np.vstack([frac / n, (1.0 - frac) / n])


def _oracle_log_sinkhorn(log_kernel: np.ndarray, tol: float = 1e-12, min_iters: int = 10_000) -> np.ndarray:
    k, n = log_kernel.shape
    log_r, log_c = -np.log(k), -np.log(n)
    f = np.zeros(k)
    g = np.zeros(n)
    it = 0
    while True:
        f = log_r - logsumexp(log_kernel + g[None, :], axis=1)
        g = log_c - logsumexp(log_kernel + f[:, None], axis=0)
        it += 1
        if it >= min_iters:
            plan = np.exp(log_kernel + f[:, None] + g[None, :])
            if np.max(np.abs(plan.sum(axis=1) - 1.0 / k)) < tol and np.max(np.abs(plan.sum(axis=0) - 1.0 / n)) < tol:
                return plan
            if it > 50 * min_iters:
                raise MatrixError("oracle Sinkhorn failed to reach the marginal tolerance")


def oracle_solution(p, lam: float) -> np.ndarray:
    """Minimizer ``Y_hat`` of the entropic transport objective, by an independent route."""
    p = _probs(p)
    k, n = p.shape[0] - 1, p.shape[1]
    if not (k <= 2 or k * n <= ORACLE_MAX_CELLS):
        raise MatrixError("oracle scale exceeded")
    if np.any(p <= 0):
        raise MatrixError("log-domain violation: probabilities must be > 0")
    cost = -np.log(p[1:] / n)
    if k == 1:
        return np.full((1, n), 1.0 / n)
    if k == 2 and n == 2:
        return _oracle_two_by_two(cost, lam)
    if k == 2:
        return _oracle_two_rows(np.exp(-lam * (cost - cost.min())))
    return _oracle_log_sinkhorn(-lam * cost)


def oracle_labels(p, xi: float, lam: float = DEFAULT_LAMBDA) -> PseudoLabelMatrix:
    p = _probs(p)
    _check_xi(xi, p.shape[0] - 1)
    return assemble(oracle_solution(p, lam), xi, lam, 0)
