"""Central finite-difference checks of the analytic loss and encoder gradients.

Finite differences perturb only the prediction path.  Pseudo-labels and the
detached copies of ``ps``/``pt`` used as regularization targets are frozen at
their unperturbed values, mirroring how the analytic gradient treats them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .encoder import EncoderParams, backward, forward, init_encoder
from .loss import LossReport, cross_entropy_term, xmoco_loss
from .matrix import MatrixError, l2_normalize_columns
from .probability import get_prob, logits_backward, prob_from_logits
from .pseudolabel import sinkhorn_labels

LossFn = Callable[..., LossReport]
DEFAULT_STEP = 1e-5
TOLERANCE = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; zero when both vanish."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def frozen_total(ps, pt, ys, yt, ps_const, pt_const, xsim_reg: bool) -> float:
    """Loss value with live predictions and frozen targets."""
    total = cross_entropy_term(ys, pt) + cross_entropy_term(yt, ps)
    if xsim_reg:
        total += cross_entropy_term(ps_const, pt) + cross_entropy_term(pt_const, ps)
    return total


@dataclass
class CheckResult:
    name: str
    worst: float
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def logit_instance(rng: np.random.Generator, k: int, n: int, xi: float = 0.9, lam: float = 2.0):
    zs = rng.normal(scale=2.0, size=(k + 1, n))
    zt = rng.normal(scale=2.0, size=(k + 1, n))
    ps, pt = prob_from_logits(zs, 1.0), prob_from_logits(zt, 1.0)
    ys = sinkhorn_labels(ps, xi, lam, 3)
    yt = sinkhorn_labels(pt, xi, lam, 3)
    return zs, zt, ys.y, yt.y


def check_logit_gradients(zs, zt, ys, yt, xsim_reg: bool = True, loss_fn: LossFn = xmoco_loss,
                          h: float = DEFAULT_STEP) -> float:
    ps = prob_from_logits(zs, 1.0).p
    pt = prob_from_logits(zt, 1.0).p
    rep = loss_fn(ps, pt, ys, yt, xsim_reg=xsim_reg)
    worst = 0.0
    for side, z, analytic in (("s", zs, rep.grad_logits_s), ("t", zt, rep.grad_logits_t)):
        numeric = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            vals = []
            for sgn in (1.0, -1.0):
                zp = z.copy()
                zp[idx] += sgn * h
                p_new = prob_from_logits(zp, 1.0).p
                if side == "s":
                    vals.append(frozen_total(p_new, pt, ys, yt, ps, pt, xsim_reg))
                else:
                    vals.append(frozen_total(ps, p_new, ys, yt, ps, pt, xsim_reg))
            numeric[idx] = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_loss_module(seed: int = 0, instances: int = 20, loss_fn: LossFn = xmoco_loss,
                      k_values=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    errors = []
    for i in range(instances):
        k = int(k_values[i % len(k_values)]) if k_values else int(rng.integers(1, 7))
        n = int(rng.integers(1, 5))
        zs, zt, ys, yt = logit_instance(rng, k, n)
        xsim = bool(i % 4 != 3)
        errors.append(check_logit_gradients(zs, zt, ys, yt, xsim_reg=xsim, loss_fn=loss_fn))
    return CheckResult("loss/logits", max(errors), errors)


@dataclass
class PipelineInstance:
    f: EncoderParams
    g: EncoderParams
    xs: np.ndarray
    xt: np.ndarray
    bank_s: np.ndarray
    bank_t: np.ndarray
    tau: float
    xi: float
    lam: float


def pipeline_instance(rng: np.random.Generator, d_in: int = 4, d: int = 3, hidden=(5,), n: int = 2,
                      k: int = 2, tau: float = 0.2, xi: float = 0.9, lam: float = 2.0) -> PipelineInstance:
    dims = (d_in,) + tuple(hidden) + (d,)
    while True:
        f = init_encoder(dims, seed=int(rng.integers(2**31)))
        for b in f.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        g = f.copy()
        for t in g.tensors():
            t += rng.normal(scale=0.05, size=t.shape)
        xs = rng.normal(size=(d_in, n))
        xt = rng.normal(size=(d_in, n))
        try:
            _, ts = forward(f, xs)
            _, tt = forward(f, xt)
            forward(g, xs)
            forward(g, xt)
        except MatrixError:
            continue
        # Keep rectifier inputs away from the kink so central differences stay smooth.
        if all(np.min(np.abs(z)) > 1e-3 for z in ts.pre[:-1] + tt.pre[:-1]):
            break
    bank_s = l2_normalize_columns(rng.normal(size=(d, k)))
    bank_t = l2_normalize_columns(rng.normal(size=(d, k)))
    return PipelineInstance(f, g, xs, xt, bank_s, bank_t, tau, xi, lam)


def pipeline_gradients(inst: PipelineInstance, xsim_reg: bool = True, loss_fn: LossFn = xmoco_loss):
    """Analytic gradient of the total loss w.r.t. every tensor of f, plus the frozen targets."""
    qs, tape_s = forward(inst.f, inst.xs)
    qt, tape_t = forward(inst.f, inst.xt)
    ks, _ = forward(inst.g, inst.xs)
    kt, _ = forward(inst.g, inst.xt)
    ps = get_prob(qs, kt, inst.bank_t, inst.tau)
    pt = get_prob(qt, ks, inst.bank_s, inst.tau)
    ys = sinkhorn_labels(ps, inst.xi, inst.lam, 3).y
    yt = sinkhorn_labels(pt, inst.xi, inst.lam, 3).y
    rep = loss_fn(ps, pt, ys, yt, xsim_reg=xsim_reg)
    gs, _ = backward(inst.f, tape_s, logits_backward(rep.grad_logits_s, kt, inst.bank_t, inst.tau))
    gt, _ = backward(inst.f, tape_t, logits_backward(rep.grad_logits_t, ks, inst.bank_s, inst.tau))
    grads = [a + b for a, b in zip(gs.tensors(), gt.tensors())]
    frozen = dict(ks=ks, kt=kt, ys=ys, yt=yt, ps=ps.p, pt=pt.p)
    return grads, frozen


def pipeline_loss(inst: PipelineInstance, f: EncoderParams, frozen: dict, xsim_reg: bool = True) -> float:
    qs, _ = forward(f, inst.xs)
    qt, _ = forward(f, inst.xt)
    ps = get_prob(qs, frozen["kt"], inst.bank_t, inst.tau).p
    pt = get_prob(qt, frozen["ks"], inst.bank_s, inst.tau).p
    return frozen_total(ps, pt, frozen["ys"], frozen["yt"], frozen["ps"], frozen["pt"], xsim_reg)


def check_pipeline_gradients(inst: PipelineInstance, xsim_reg: bool = True, loss_fn: LossFn = xmoco_loss,
                             h: float = DEFAULT_STEP) -> float:
    analytic, frozen = pipeline_gradients(inst, xsim_reg, loss_fn)
    f = inst.f.copy()
    worst = 0.0
    for a, t in zip(analytic, f.tensors()):
        numeric = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + h
            up = pipeline_loss(inst, f, frozen, xsim_reg)
            t[idx] = orig - h
            down = pipeline_loss(inst, f, frozen, xsim_reg)
            t[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        worst = max(worst, relative_error(a, numeric))
    return worst


def check_pipeline(seed: int = 0, instances: int = 20, loss_fn: LossFn = xmoco_loss, k_values=None) -> CheckResult:
    rng = np.random.default_rng(seed + 10_007)
    errors = []
    for i in range(instances):
        k = int(k_values[i % len(k_values)]) if k_values else int(rng.integers(1, 7))
        n = int(rng.integers(1, 5))
        inst = pipeline_instance(rng, n=n, k=k, tau=float(rng.choice([0.2, 0.5, 1.0])))
        errors.append(check_pipeline_gradients(inst, xsim_reg=bool(i % 4 != 3), loss_fn=loss_fn))
    return CheckResult("encoder/pipeline", max(errors), errors)


def run_all(seed: int = 0, instances: int = 20, loss_fn: LossFn = xmoco_loss, k_values=None) -> list[CheckResult]:
    return [
        check_loss_module(seed, instances, loss_fn, k_values),
        check_pipeline(seed, instances, loss_fn, k_values),
    ]
