"""FIFO key banks, peer assembly, and the optional queue of past probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import MatrixError, as_mat, l2_normalize_columns
from .probability import ProbMatrix


@dataclass
class MemoryBank:
    """Circular ``d x K`` buffer; ``cursor`` points at the oldest column."""

    features: np.ndarray
    cursor: int = 0

    @property
    def capacity(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @classmethod
    def random(cls, dim: int, capacity: int, rng: np.random.Generator) -> "MemoryBank":
        return cls(l2_normalize_columns(rng.standard_normal((dim, capacity))), 0)

    def snapshot(self) -> np.ndarray:
        return self.features.copy()

    def in_age_order(self) -> np.ndarray:
        """Columns from oldest to newest."""
        return np.roll(self.features, -self.cursor, axis=1)


def enqueue_dequeue(bank: MemoryBank, keys) -> MemoryBank:
    """Overwrite the N oldest columns with ``keys`` (in arrival order), in place."""
    keys = as_mat(keys)
    n = keys.shape[1]
    if keys.shape[0] != bank.dim:
        raise MatrixError(f"key dim {keys.shape[0]} != bank dim {bank.dim}")
    if n > bank.capacity:
        raise MatrixError("batch exceeds bank")
    idx = (bank.cursor + np.arange(n)) % bank.capacity
    bank.features[:, idx] = keys
    bank.cursor = int((bank.cursor + n) % bank.capacity)
    return bank


def assemble_peers(bank: MemoryBank, current_key) -> np.ndarray:
    """``d x (K+1)`` peer matrix: the current key followed by a bank snapshot."""
    key = np.asarray(current_key, dtype=np.float64).reshape(-1, 1)
    if key.shape[0] != bank.dim:
        raise MatrixError(f"key dim {key.shape[0]} != bank dim {bank.dim}")
    return np.hstack([key, bank.snapshot()])


class ProbQueue:
    """Ring of past probability columns, oldest first; capacity 0 disables it."""

    def __init__(self, rows: int, capacity: int):
        if capacity < 0:
            raise MatrixError("queue capacity must be >= 0")
        self.rows = rows
        self.capacity = capacity
        self.columns = np.zeros((rows, 0))

    def __len__(self) -> int:
        return self.columns.shape[1]

    def push(self, p) -> None:
        p = p.p if isinstance(p, ProbMatrix) else as_mat(p)
        if p.shape[0] != self.rows:
            raise MatrixError(f"row-count mismatch: {p.shape[0]} vs {self.rows}")
        if self.capacity == 0:
            return
        self.columns = np.hstack([self.columns, p])[:, -self.capacity:]


def extend_marginals(p, queue: ProbQueue) -> tuple[np.ndarray, slice]:
    """Append queued columns to ``p``; labels for the loss come from ``current_span``.

    The caller pushes the current batch into the queue after solving.
    """
    arr = p.p if isinstance(p, ProbMatrix) else as_mat(p)
    if arr.shape[0] != queue.rows:
        raise MatrixError(f"row-count mismatch: {arr.shape[0]} vs {queue.rows}")
    span = slice(0, arr.shape[1])
    if len(queue) == 0:
        return arr, span
    return np.hstack([arr, queue.columns]), span
