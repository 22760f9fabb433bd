"""Rectified MLP encoder with an L2-normalized output and its momentum twin."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import MatrixError, as_mat, check_finite, column_norms

DEFAULT_HIDDEN = (64, 64)
DEFAULT_OUT_DIM = 16
DEFAULT_EMA = 0.99


@dataclass
class EncoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_tensors(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{prefix}.w{i}", w), (f"{prefix}.b{i}", b)]
        return out


@dataclass
class Tape:
    inputs: list[np.ndarray]  # input to each linear layer
    pre: list[np.ndarray]  # pre-activation of each layer
    raw: np.ndarray  # last layer output before normalization
    norms: np.ndarray
    features: np.ndarray


def init_encoder(dims, seed: int) -> EncoderParams:
    """Glorot-uniform weights, zero biases; ``dims = (d_in, h1, ..., d)``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or min(dims) < 1:
        raise MatrixError(f"invalid encoder dims {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros((fan_out, 1)))
    return EncoderParams(weights, biases)


def hidden_features(params: EncoderParams, batch) -> np.ndarray:
    """Activations feeding the last linear layer (the penultimate representation)."""
    h = as_mat(batch)
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(w @ h + b, 0.0)
    return h


def embed(params: EncoderParams, samples, penultimate: bool = False) -> np.ndarray:
    """Frozen-encoder features; ``penultimate`` gives the normalized hidden activations."""
    if penultimate:
        h = hidden_features(params, samples)
        return h / np.maximum(column_norms(h), 1e-300)
    return forward(params, samples)[0]


def forward(params: EncoderParams, batch) -> tuple[np.ndarray, Tape]:
    x = as_mat(batch)
    check_finite(x, "encoder input")
    if x.shape[0] != params.weights[0].shape[1]:
        raise MatrixError(f"input dim {x.shape[0]} != encoder input dim {params.weights[0].shape[1]}")
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = w @ h + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    norms = column_norms(h)
    if np.any(norms == 0.0):
        raise MatrixError("degenerate embedding")
    feats = h / norms
    return feats, Tape(inputs=inputs, pre=pre, raw=h, norms=norms, features=feats)


def backward(params: EncoderParams, tape: Tape, grad_features) -> tuple[EncoderParams, np.ndarray]:
    """Chain rule from feature gradients to parameter and input gradients."""
    g = as_mat(grad_features)
    if g.shape != tape.features.shape:
        raise MatrixError(f"grad shape {g.shape} != feature shape {tape.features.shape}")
    y = tape.features
    # Jacobian of z/|z| projects out the radial component.
    g = (g - y * np.einsum("dn,dn->n", y, g)) / tape.norms
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * (tape.pre[i] > 0)
        gw[i] = g @ tape.inputs[i].T
        gb[i] = g.sum(axis=1, keepdims=True)
        g = params.weights[i].T @ g
    return EncoderParams(gw, gb), g


@dataclass
class MomentumPair:
    f: EncoderParams
    g: EncoderParams
    m: float = DEFAULT_EMA

    @classmethod
    def from_encoder(cls, f: EncoderParams, m: float = DEFAULT_EMA) -> "MomentumPair":
        return cls(f=f, g=f.copy(), m=m)


def momentum_update(pair: MomentumPair) -> MomentumPair:
    """In-place ``g <- m g + (1 - m) f``; returns the same pair."""
    m = pair.m
    if not 0.0 <= m <= 1.0:
        raise MatrixError(f"momentum must be in [0, 1], got {m}")
    for gt, ft in zip(pair.g.tensors(), pair.f.tensors()):
        if gt.shape != ft.shape:
            raise MatrixError("encoder shapes differ")
        gt[...] = m * gt + (1.0 - m) * ft
    return pair
