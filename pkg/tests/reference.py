"""Slow, deliberately naive reference implementations used as test oracles."""

import math

import numpy as np

from xmoco.encoder import backward, forward, momentum_update
from xmoco.probability import get_prob, logits_backward


def softmax_column_by_hand(col):
    m = max(col)
    e = [math.exp(v - m) for v in col]
    s = sum(e)
    return [v / s for v in e]


def grid_oracle_2x2(cost, lam, points=200_001, rounds=6):
    """Minimize the entropic objective over {[[t, 1/2-t], [1/2-t, t]]} by nested grids."""
    lo, hi = 0.0, 0.5

    def f(t):
        y = np.stack([t, 0.5 - t, 0.5 - t, t])
        c = np.array([cost[0, 0], cost[0, 1], cost[1, 0], cost[1, 1]])[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(y > 0, y * np.log(y), 0.0)
        return (y * c).sum(axis=0) + ent.sum(axis=0) / lam

    for _ in range(rounds):
        ts = np.linspace(lo, hi, points)
        i = int(np.argmin(f(ts)))
        step = (hi - lo) / (points - 1)
        lo, hi = max(0.0, ts[i] - 2 * step), min(0.5, ts[i] + 2 * step)
    t = 0.5 * (lo + hi)
    return np.array([[t, 0.5 - t], [0.5 - t, t]])


def random_feasible_plan(rng, k, n):
    """A random point of the transportation polytope (rows 1/K, columns 1/N)."""
    y = rng.random((k, n)) ** 3 + 1e-3
    for _ in range(500):
        y /= y.sum(axis=1, keepdims=True) * k
        y /= y.sum(axis=0, keepdims=True) * n
    return y


class ListFIFO:
    def __init__(self, items):
        self.items = list(items)

    def push(self, new):
        self.items.extend(new)
        del self.items[: len(new)]


def knn_bruteforce(train, train_labels, test, test_labels, k):
    """Exhaustive pairwise comparison with Python sorting."""
    correct = 0
    for j in range(test.shape[1]):
        sims = []
        for i in range(train.shape[1]):
            s = sum(float(a) * float(b) for a, b in zip(test[:, j], train[:, i]))
            sims.append((-s, i))
        sims.sort()
        votes = {}
        for _, i in sims[:k]:
            votes[int(train_labels[i])] = votes.get(int(train_labels[i]), 0) + 1
        best = max(votes.values())
        pred = min(c for c, v in votes.items() if v == best)
        correct += pred == int(test_labels[j])
    return correct / test.shape[1]


def classical_reference_step(state, batch, cfg, spec):
    """One-hot infoNCE step on both sides, written without pseudo-labels or the swapped loss."""
    from xmoco.bank import enqueue_dequeue
    from xmoco.data import two_views
    from xmoco.loss import classical_grad_logits, classical_loss
    from xmoco.training import cosine_lr, sgd_update

    f, g = state.pair.f, state.pair.g
    xs, xt = two_views(np.asarray(batch, dtype=np.float64), spec, state.rng)
    qs, tape_s = forward(f, xs)
    qt, tape_t = forward(f, xt)
    ks, _ = forward(g, xs)
    kt, _ = forward(g, xt)
    ps = get_prob(qs, kt, state.bank_t.features, cfg.tau)
    pt = get_prob(qt, ks, state.bank_s.features, cfg.tau)
    loss = classical_loss(ps, pt)
    dqs = logits_backward(classical_grad_logits(ps), kt, state.bank_t.features, cfg.tau)
    dqt = logits_backward(classical_grad_logits(pt), ks, state.bank_s.features, cfg.tau)
    gs, _ = backward(f, tape_s, dqs)
    gt, _ = backward(f, tape_t, dqt)
    grads = [a + b for a, b in zip(gs.tensors(), gt.tensors())]
    lr = cosine_lr(state.step, state.total_steps, cfg.lr)
    sgd_update(f.tensors(), grads, state.velocities, lr, cfg.sgd_momentum, cfg.weight_decay)
    momentum_update(state.pair)
    enqueue_dequeue(state.bank_s, ks)
    enqueue_dequeue(state.bank_t, kt)
    state.step += 1
    return loss, ps, pt


def flipped_reg_sign(ps, pt, ys, yt, xsim_reg=True):
    """Mutant loss whose source-side regularization gradient has the wrong sign."""
    from xmoco.loss import xmoco_loss

    rep = xmoco_loss(ps, pt, ys, yt, xsim_reg)
    if not xsim_reg:
        return rep
    ps_a, pt_a = getattr(ps, "p", ps), getattr(pt, "p", pt)
    flip = 2 * (ps_a - pt_a) / ps_a.shape[1]
    return type(rep)(**{**rep.__dict__, "grad_logits_s": rep.grad_logits_s - flip})
