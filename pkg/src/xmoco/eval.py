"""Frozen-feature evaluation: cosine k-NN vote and a softmax linear probe."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import EncoderParams, embed
from .matrix import MatrixError, as_mat, log_softmax_columns

DEFAULT_K = 5


@dataclass
class EvalReport:
    knn_accuracy: float | None = None
    linear_accuracy: float | None = None
    k: int | None = None
    train_size: int = 0
    test_size: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def knn_predict(train_feats, train_labels, test_feats, k: int, chunk: int = 1024) -> np.ndarray:
    """Uniform majority vote over the k most cosine-similar training points.

    Neighbour ranking breaks similarity ties by lower training index; vote
    ties go to the smallest class id.
    """
    tr = as_mat(train_feats)
    te = as_mat(test_feats)
    y = np.asarray(train_labels)
    if k < 1:
        raise MatrixError("k must be >= 1")
    if tr.shape[1] == 0 or te.shape[1] == 0:
        raise MatrixError("empty split")
    if k > tr.shape[1]:
        raise MatrixError(f"k={k} exceeds train size {tr.shape[1]}")
    classes, y_idx = np.unique(y, return_inverse=True)
    out = np.empty(te.shape[1], dtype=classes.dtype)
    for start in range(0, te.shape[1], chunk):
        sim = te[:, start:start + chunk].T @ tr
        nn = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        votes = np.zeros((sim.shape[0], classes.size), dtype=np.int64)
        np.add.at(votes, (np.repeat(np.arange(sim.shape[0]), k), y_idx[nn].ravel()), 1)
        out[start:start + chunk] = classes[np.argmax(votes, axis=1)]
    return out


def knn_eval(train_feats, train_labels, test_feats, test_labels, k: int = DEFAULT_K) -> float:
    pred = knn_predict(train_feats, train_labels, test_feats, k)
    return float(np.mean(pred == np.asarray(test_labels)))


@dataclass
class LinearProbe:
    weight: np.ndarray  # classes x d
    bias: np.ndarray  # classes x 1
    classes: np.ndarray
    losses: list

    def predict(self, feats) -> np.ndarray:
        scores = self.weight @ as_mat(feats) + self.bias
        return self.classes[np.argmax(scores, axis=0)]


def fit_linear_probe(feats, labels, steps: int = 500, lr: float = 0.5) -> LinearProbe:
    """Full-batch gradient descent on multinomial logistic regression from zero init."""
    x = as_mat(feats)
    classes, y_idx = np.unique(np.asarray(labels), return_inverse=True)
    if classes.size < 2:
        raise MatrixError("linear probe needs at least two classes")
    c, n = classes.size, x.shape[1]
    onehot = np.zeros((c, n))
    onehot[y_idx, np.arange(n)] = 1.0
    w = np.zeros((c, x.shape[0]))
    b = np.zeros((c, 1))
    losses = []
    for _ in range(steps):
        logp = log_softmax_columns(w @ x + b)
        losses.append(float(-np.sum(onehot * logp) / n))
        g = (np.exp(logp) - onehot) / n
        w -= lr * (g @ x.T)
        b -= lr * g.sum(axis=1, keepdims=True)
    logp = log_softmax_columns(w @ x + b)
    losses.append(float(-np.sum(onehot * logp) / n))
    return LinearProbe(w, b, classes, losses)


def linear_probe(train_feats, train_labels, test_feats, test_labels, steps: int = 500, lr: float = 0.5) -> float:
    probe = fit_linear_probe(train_feats, train_labels, steps=steps, lr=lr)
    return float(np.mean(probe.predict(test_feats) == np.asarray(test_labels)))


def split_indices(m: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(m)
    n_test = max(1, int(round(test_fraction * m)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def evaluate(params: EncoderParams, samples, labels, k: int = DEFAULT_K, test_fraction: float = 0.25,
             split_seed: int = 0, penultimate: bool = False, knn: bool = True, linear: bool = False,
             probe_steps: int = 500, probe_lr: float = 0.5) -> EvalReport:
    """Embed every sample with the frozen encoder and score a seeded train/test split."""
    labels = np.asarray(labels)
    feats = embed(params, samples, penultimate=penultimate)
    tr, te = split_indices(labels.size, test_fraction, split_seed)
    report = EvalReport(k=k if knn else None, train_size=int(tr.size), test_size=int(te.size))
    if knn:
        report.knn_accuracy = knn_eval(feats[:, tr], labels[tr], feats[:, te], labels[te], k)
    if linear:
        report.linear_accuracy = linear_probe(feats[:, tr], labels[tr], feats[:, te], labels[te], probe_steps, probe_lr)
    return report
