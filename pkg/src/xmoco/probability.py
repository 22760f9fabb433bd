"""Temperature-scaled similarity probabilities over one positive and K negative peers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import MatrixError, as_mat, column_norms, softmax_columns

NORM_TOL = 1e-6


@dataclass(frozen=True)
class ProbMatrix:
    """Column-stochastic ``(K+1) x N`` matrix; row 0 is the positive peer.

    ``logits`` holds the pre-softmax scores (cosine / temperature) because the
    loss gradient is expressed against them.
    """

    p: np.ndarray
    logits: np.ndarray
    temperature: float

    @property
    def k(self) -> int:
        return self.p.shape[0] - 1

    @property
    def n(self) -> int:
        return self.p.shape[1]


def _check_unit(m: np.ndarray, what: str) -> None:
    if m.size and np.max(np.abs(column_norms(m) - 1.0)) > NORM_TOL:
        raise MatrixError(f"unnormalized feature in {what}")


def peer_logits(queries, current_keys, bank, temperature: float) -> np.ndarray:
    """Logit matrix ``[q_n . k_n ; bank^T q_n] / tau`` of shape ``(K+1) x N``."""
    if not temperature > 0:
        raise MatrixError(f"temperature must be > 0, got {temperature}")
    q = as_mat(queries)
    k = as_mat(current_keys)
    b = as_mat(bank)
    if q.shape != k.shape:
        raise MatrixError(f"queries {q.shape} and keys {k.shape} differ")
    if b.shape[0] != q.shape[0]:
        raise MatrixError(f"bank dim {b.shape[0]} != feature dim {q.shape[0]}")
    _check_unit(q, "queries")
    _check_unit(k, "keys")
    _check_unit(b, "bank")
    pos = np.einsum("dn,dn->n", q, k)[None, :]
    neg = b.T @ q
    return np.vstack([pos, neg]) / temperature


def get_prob(queries, current_keys, bank, temperature: float) -> ProbMatrix:
    logits = peer_logits(queries, current_keys, bank, temperature)
    return ProbMatrix(p=softmax_columns(logits), logits=logits, temperature=float(temperature))


def prob_from_logits(logits, temperature: float) -> ProbMatrix:
    logits = as_mat(logits)
    return ProbMatrix(p=softmax_columns(logits), logits=logits, temperature=float(temperature))


def logits_backward(grad_logits, current_keys, bank, temperature: float) -> np.ndarray:
    """Pull a logit gradient back onto the queries (keys and bank are constants)."""
    g = as_mat(grad_logits)
    k = as_mat(current_keys)
    b = as_mat(bank)
    return (k * g[0:1, :] + b @ g[1:, :]) / temperature
