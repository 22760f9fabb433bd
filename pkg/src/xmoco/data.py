"""Synthetic clustered datasets, random semantic-preserving views, and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .matrix import MatrixError


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray  # d_in x M
    labels: np.ndarray  # length M, evaluation only
    name: str = "dataset"
    seed: int | None = None

    @property
    def size(self) -> int:
        return self.samples.shape[1]

    @property
    def dim(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class TransformSpec:
    noise_sigma: float = 0.3
    scale_range: tuple[float, float] = (0.8, 1.2)
    mask_fraction: float = 0.0625
    flip_prob: float = 0.0
    flip_pairs: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def validate(self, dim: int | None = None) -> None:
        lo, hi = self.scale_range
        if self.noise_sigma < 0:
            raise MatrixError("noise_sigma must be >= 0")
        if not 0 < lo <= hi:
            raise MatrixError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0 <= self.mask_fraction < 1:
            raise MatrixError("mask_fraction must be in [0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise MatrixError("flip_prob must be in [0, 1]")
        if dim is not None:
            for i, j in self.flip_pairs:
                if not (0 <= i < dim and 0 <= j < dim):
                    raise MatrixError(f"flip pair ({i}, {j}) outside dimension {dim}")

    @classmethod
    def identity(cls) -> "TransformSpec":
        return cls(noise_sigma=0.0, scale_range=(1.0, 1.0), mask_fraction=0.0, flip_prob=0.0)


def _centroids(classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    # Orthogonal directions of length s/sqrt(2) are exactly s apart.
    if classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        return q * (separation / np.sqrt(2.0))
    for _ in range(10_000):
        c = rng.standard_normal((dim, classes))
        c *= separation / np.sqrt(2.0) / np.linalg.norm(c, axis=0)
        d = np.linalg.norm(c[:, :, None] - c[:, None, :], axis=0)
        if np.min(d[np.triu_indices(classes, 1)]) >= separation:
            return c
    raise MatrixError("could not place centroids at the requested separation")


def make_blobs(classes: int, per_class: int, d_in: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian clusters whose centroids are >= ``separation`` apart."""
    if classes < 1 or per_class < 1 or d_in < 1:
        raise MatrixError("degenerate dims")
    if not separation > 0:
        raise MatrixError("separation must be > 0")
    rng = np.random.default_rng(seed)
    centers = _centroids(classes, d_in, separation, rng) if classes > 1 else np.zeros((d_in, 1))
    labels = np.repeat(np.arange(classes), per_class)
    samples = centers[:, labels] + rng.standard_normal((d_in, labels.size))
    order = rng.permutation(labels.size)
    return Dataset(samples=samples[:, order], labels=labels[order], name="blobs", seed=seed)


def class_centroids(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    classes = np.unique(ds.labels)
    return classes, np.stack([ds.samples[:, ds.labels == c].mean(axis=1) for c in classes], axis=1)


def nearest_centroid(x: np.ndarray, classes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(axis=0)[None, :] - 2.0 * centers.T @ x + (centers * centers).sum(axis=0)[:, None]
    return classes[np.argmin(d2, axis=0)]


def transform(x: np.ndarray, spec: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    """One random draw of the transformation family applied to columns of ``x``."""
    x = np.array(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    dim, n = x.shape
    lo, hi = spec.scale_range
    if hi > lo:
        x = x * rng.uniform(lo, hi, size=(1, n))
    elif lo != 1.0:
        x = x * lo
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * rng.standard_normal((dim, n))
    n_mask = int(round(spec.mask_fraction * dim))
    if n_mask:
        idx = np.argsort(rng.random((dim, n)), axis=0)[:n_mask]
        x[idx, np.arange(n)[None, :]] = 0.0
    if spec.flip_prob > 0 and spec.flip_pairs:
        for i, j in spec.flip_pairs:
            sign = np.where(rng.random(n) < spec.flip_prob, -1.0, 1.0)
            x[i] *= sign
            x[j] *= sign
    return x


def two_views(sample, spec: TransformSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Source and target views from two independent draws; accepts a vector or a batch."""
    vec = np.ndim(sample) == 1
    vs = transform(sample, spec, rng)
    vt = transform(sample, spec, rng)
    if vec:
        return vs[:, 0], vt[:, 0]
    return vs, vt


def preservation_rate(ds: Dataset, spec: TransformSpec, rng: np.random.Generator, draws: int = 1) -> float:
    """Fraction of views whose nearest class centroid matches the original's."""
    classes, centers = class_centroids(ds)
    base = nearest_centroid(ds.samples, classes, centers)
    hits = total = 0
    for _ in range(draws):
        vs, vt = two_views(ds.samples, spec, rng)
        hits += int(np.sum(nearest_centroid(vs, classes, centers) == base))
        hits += int(np.sum(nearest_centroid(vt, classes, centers) == base))
        total += 2 * ds.size
    return hits / total


def epoch_batches(ds_or_size, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Without-replacement partition into full batches; the remainder is dropped."""
    m = ds_or_size.size if isinstance(ds_or_size, Dataset) else int(ds_or_size)
    if batch_size < 1 or batch_size > m:
        raise MatrixError(f"batch size {batch_size} invalid for {m} samples")
    perm = rng.permutation(m)
    nb = m // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(nb)]


def standardize(samples: np.ndarray) -> np.ndarray:
    mu = samples.mean(axis=1, keepdims=True)
    sd = samples.std(axis=1, keepdims=True)
    sd[sd == 0] = 1.0
    return (samples - mu) / sd


def load_delimited(path, has_labels: bool = False, standardize_rows: bool = True) -> Dataset:
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if rec[0].lstrip().startswith("#"):
                continue
            if rows and len(rec) != len(rows[0]):
                raise MatrixError(f"line {lineno}: ragged row ({len(rec)} fields, expected {len(rows[0])})")
            try:
                rows.append([float(v) for v in rec])
            except ValueError as exc:
                raise MatrixError(f"line {lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise MatrixError("empty table")
    table = np.array(rows, dtype=np.float64)
    if has_labels:
        if table.shape[1] < 2:
            raise MatrixError("labelled table needs at least one feature column")
        lab = table[:, -1]
        if np.any(lab != np.round(lab)):
            raise MatrixError("label column must hold integers")
        labels = lab.astype(np.int64)
        table = table[:, :-1]
    else:
        labels = np.zeros(table.shape[0], dtype=np.int64)
    samples = table.T.copy()
    if standardize_rows:
        samples = standardize(samples)
    return Dataset(samples=samples, labels=labels, name=str(path))


def write_delimited(path, ds: Dataset, with_labels: bool = True, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        for j in range(ds.size):
            row = [repr(float(v)) for v in ds.samples[:, j]]
            if with_labels:
                row.append(str(int(ds.labels[j])))
            w.writerow(row)
