"""Symmetric swapped-label cross-entropy with cross-similarity regularization.

All targets (pseudo-labels and the detached copies of the opposite side's
probabilities) are constants.  Gradients are returned with respect to the
logits that produced ``ps`` and ``pt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .matrix import MatrixError, as_mat
from .probability import ProbMatrix
from .pseudolabel import PseudoLabelMatrix

LABEL_SUM_TOL = 1e-6


@dataclass(frozen=True)
class LossSwitches:
    """Ablation grid: soft uniform labels (off -> one-hot) and the regularization pair."""

    uniform_labels: bool = True
    xsim_reg: bool = True


@dataclass(frozen=True)
class LossReport:
    total: float
    term_label_s_on_pt: float
    term_label_t_on_ps: float
    term_xsim_s_on_pt: float
    term_xsim_t_on_ps: float
    grad_logits_s: np.ndarray
    grad_logits_t: np.ndarray

    def terms(self) -> dict:
        return {
            "term_label_s_on_pt": self.term_label_s_on_pt,
            "term_label_t_on_ps": self.term_label_t_on_ps,
            "term_xsim_s_on_pt": self.term_xsim_s_on_pt,
            "term_xsim_t_on_ps": self.term_xsim_t_on_ps,
        }


def _arr(x) -> np.ndarray:
    if isinstance(x, ProbMatrix):
        return x.p
    if isinstance(x, PseudoLabelMatrix):
        return x.y
    return as_mat(x)


def _xlogy(t: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``t * log p`` with ``0 log 0 = 0``; a zero prediction under target mass is an error."""
    if np.any(p < 0) or np.any((p == 0) & (t != 0)):
        raise MatrixError("nonpositive probability in prediction")
    return xlogy(t, p)


def cross_entropy_term(target, pred) -> float:
    """``-(1/N) sum_n sum_k target[k, n] log pred[k, n]``."""
    t, p = _arr(target), _arr(pred)
    if t.shape != p.shape:
        raise MatrixError(f"shape mismatch: target {t.shape} vs pred {p.shape}")
    return float(-np.sum(_xlogy(t, p)) / p.shape[1])


def classical_loss(ps, pt) -> float:
    ps, pt = _arr(ps), _arr(pt)
    if ps.shape != pt.shape:
        raise MatrixError(f"shape mismatch: {ps.shape} vs {pt.shape}")
    if np.any(ps[0] <= 0) or np.any(pt[0] <= 0):
        raise MatrixError("nonpositive probability in prediction")
    return float(-(np.sum(np.log(ps[0])) + np.sum(np.log(pt[0]))) / ps.shape[1])


def classical_grad_logits(p) -> np.ndarray:
    """Gradient of the one-hot cross-entropy on one side w.r.t. its logits."""
    p = _arr(p)
    onehot = np.zeros_like(p)
    onehot[0] = 1.0
    return (p - onehot) / p.shape[1]


def _check_labels(y: np.ndarray, name: str) -> None:
    dev = np.max(np.abs(y.sum(axis=0) - 1.0))
    if dev > LABEL_SUM_TOL:
        raise MatrixError(f"{name} column sums deviate from 1 by {dev:.3g}")


def xmoco_loss(ps, pt, ys, yt, xsim_reg: bool = True) -> LossReport:
    """Swapped-label loss: ``ys`` supervises ``pt`` and ``yt`` supervises ``ps``.

    With ``xsim_reg`` the two regularization terms ``CE(ps_const -> pt)`` and
    ``CE(pt_const -> ps)`` are added; their targets carry no gradient.
    """
    ps_a, pt_a, ys_a, yt_a = _arr(ps), _arr(pt), _arr(ys), _arr(yt)
    shape = ps_a.shape
    for name, m in (("pt", pt_a), ("ys", ys_a), ("yt", yt_a)):
        if m.shape != shape:
            raise MatrixError(f"shape mismatch: {name} {m.shape} vs ps {shape}")
    _check_labels(ys_a, "ys")
    _check_labels(yt_a, "yt")
    n = shape[1]

    label_s = float(-np.sum(_xlogy(ys_a, pt_a)) / n)
    label_t = float(-np.sum(_xlogy(yt_a, ps_a)) / n)
    grad_s = ps_a - yt_a
    grad_t = pt_a - ys_a
    if xsim_reg:
        xsim_s = float(-np.sum(_xlogy(ps_a, pt_a)) / n)
        xsim_t = float(-np.sum(_xlogy(pt_a, ps_a)) / n)
        grad_s = grad_s + (ps_a - pt_a)
        grad_t = grad_t + (pt_a - ps_a)
    else:
        xsim_s = xsim_t = 0.0
    return LossReport(
        total=label_s + label_t + xsim_s + xsim_t,
        term_label_s_on_pt=label_s,
        term_label_t_on_ps=label_t,
        term_xsim_s_on_pt=xsim_s,
        term_xsim_t_on_ps=xsim_t,
        grad_logits_s=grad_s / n,
        grad_logits_t=grad_t / n,
    )
