"""Dense f64 kernels shared by every other module, plus the XMC1 file format.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, stored
row-major.  Feature matrices are column-stacked (``d x n``) and probability
matrices keep the ``(K+1) x N`` orientation, so most reductions run over
axis 0.
"""

from __future__ import annotations

import io
from typing import BinaryIO

import numpy as np

XMC1_MAGIC = b"XMC1"


class MatrixError(ValueError):
    pass


def as_mat(m) -> np.ndarray:
    arr = np.array(m, dtype=np.float64, order="C")
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise MatrixError(f"expected a 2-d matrix, got {arr.ndim} dims")
    return arr


def check_finite(m: np.ndarray, what: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise MatrixError(f"{what} contains non-finite entries")


def softmax_columns(m) -> np.ndarray:
    """Column-wise softmax with max subtraction."""
    m = as_mat(m)
    if m.size == 0:
        raise MatrixError("empty matrix")
    check_finite(m)
    z = m - m.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def log_softmax_columns(m) -> np.ndarray:
    m = as_mat(m)
    if m.size == 0:
        raise MatrixError("empty matrix")
    z = m - m.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def column_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->j", m, m))


def l2_normalize_columns(m) -> np.ndarray:
    m = as_mat(m)
    norms = column_norms(m)
    if np.any(norms == 0.0):
        raise MatrixError("zero-norm feature")
    return m / norms


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MatrixError(f"length mismatch: {x.size} vs {y.size}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise MatrixError("zero-norm feature")
    s = float(x @ y) / (nx * ny)
    return min(1.0, max(-1.0, s))


# -- XMC1 ---------------------------------------------------------------------

def write_xmc1(fh: BinaryIO, m) -> None:
    m = as_mat(m)
    rows, cols = m.shape
    fh.write(b"XMC1 %d %d\n" % (rows, cols))
    fh.write(m.astype("<f8", copy=False).tobytes(order="C"))


def read_xmc1(fh: BinaryIO) -> np.ndarray:
    header = fh.readline()
    parts = header.split()
    if len(parts) != 3 or parts[0] != XMC1_MAGIC:
        raise MatrixError(f"bad XMC1 header: {header[:40]!r}")
    try:
        rows, cols = int(parts[1]), int(parts[2])
    except ValueError:
        raise MatrixError(f"bad XMC1 header: {header[:40]!r}") from None
    if rows < 0 or cols < 0:
        raise MatrixError("negative XMC1 dimensions")
    nbytes = 8 * rows * cols
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise MatrixError(f"truncated XMC1 body: expected {nbytes} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(rows, cols)


def save_xmc1(path, m) -> None:
    with open(path, "wb") as fh:
        write_xmc1(fh, m)


def load_xmc1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_xmc1(fh)


def xmc1_bytes(m) -> bytes:
    buf = io.BytesIO()
    write_xmc1(buf, m)
    return buf.getvalue()
