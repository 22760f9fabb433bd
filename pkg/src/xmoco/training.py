"""Per-batch alternation of pseudo-label generation and SGD on the encoder.

One ``train_step``: draw two views, embed them with f (queries) and g (keys),
build both probability matrices, solve pseudo-labels on detached copies,
evaluate the swapped loss, backpropagate into f, take an SGD step, EMA-update
g, and push the keys into their banks.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import checkpoint as ckpt
from .bank import MemoryBank, ProbQueue, enqueue_dequeue, extend_marginals
from .data import Dataset, TransformSpec, epoch_batches, load_delimited, make_blobs, preservation_rate, two_views
from .encoder import EncoderParams, MomentumPair, backward, forward, init_encoder, momentum_update
from .loss import xmoco_loss
from .matrix import MatrixError
from .probability import get_prob, logits_backward
from .pseudolabel import PseudoLabelMatrix, one_hot_labels, sinkhorn_labels

log = logging.getLogger(__name__)

BASE_LR_PER_256 = 0.0675


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # objective
    tau: float = 0.2
    xi: float = 0.9
    lam: float = 2.0
    sinkhorn_iters: int = 3
    uniform_labels: bool = True
    xsim_reg: bool = True
    prob_queue: int = 0
    # bank / batch / schedule
    K: int = 256
    batch_size: int = 64
    epochs: int = 200
    base_lr: float = -1.0  # negative: 0.0675 * batch_size / 256
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_m: float = 0.99
    seed: int = 0
    # encoder
    hidden: str = "64,64"
    out_dim: int = 16
    # data
    data_path: str = ""
    has_labels: bool = True
    classes: int = 3
    per_class: int = 400
    d_in: int = 16
    separation: float = 6.0
    data_seed: int = 0
    noise_sigma: float = 0.3
    scale_min: float = 0.8
    scale_max: float = 1.2
    mask_fraction: float = 0.0625
    flip_prob: float = 0.0
    # bookkeeping
    ckpt_every: int = 0
    knn_k: int = 5

    @property
    def lr(self) -> float:
        return self.base_lr if self.base_lr >= 0 else BASE_LR_PER_256 * self.batch_size / 256

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(int(h) for h in self.hidden.split(",") if h.strip())

    def transform_spec(self) -> TransformSpec:
        return TransformSpec(
            noise_sigma=self.noise_sigma,
            scale_range=(self.scale_min, self.scale_max),
            mask_fraction=self.mask_fraction,
            flip_prob=self.flip_prob,
        )

    def validate(self) -> "TrainConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")

        need(self.tau > 0, "tau", "must be > 0")
        need(self.K >= 1, "K", "must be >= 1")
        need(1.0 / (self.K + 1) <= self.xi <= 1.0, "xi", f"must lie in [1/(K+1), 1] for K={self.K}")
        need(self.lam > 0, "lam", "must be > 0")
        need(self.sinkhorn_iters >= 1, "sinkhorn_iters", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.batch_size <= self.K, "batch_size", "must be <= K so the FIFO bank can absorb a batch")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(self.lr >= 0, "base_lr", "must be >= 0")
        need(0 <= self.sgd_momentum < 1, "sgd_momentum", "must be in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(0 <= self.ema_m <= 1, "ema_m", "must be in [0, 1]")
        need(self.prob_queue >= 0, "prob_queue", "must be >= 0")
        need(self.out_dim >= 1, "out_dim", "must be >= 1")
        try:
            dims = self.hidden_dims
        except ValueError:
            raise ConfigError(f"hidden: expected comma-separated integers (got {self.hidden!r})") from None
        need(1 <= len(dims) + 1 <= 5 and all(h >= 1 for h in dims), "hidden", "depth must be 1-5 layers of positive width")
        need(self.knn_k >= 1, "knn_k", "must be >= 1")
        need(self.ckpt_every >= 0, "ckpt_every", "must be >= 0")
        if not self.data_path:
            need(self.classes >= 1 and self.per_class >= 1 and self.d_in >= 1, "classes", "blob dims must be >= 1")
            need(self.separation > 0, "separation", "must be > 0")
        try:
            self.transform_spec().validate()
        except MatrixError as exc:
            raise ConfigError(f"transform: {exc}") from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


FIELD_TYPES = {f.name: {"float": float, "int": int, "bool": bool, "str": str}[f.type] for f in dataclasses.fields(TrainConfig)}


def config_from_pairs(pairs: dict, base: TrainConfig | None = None, where: str = "") -> TrainConfig:
    cfg = base or TrainConfig()
    updates = {}
    for key, raw in pairs.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"{where}unknown key {key!r}")
        try:
            updates[key] = raw if not isinstance(raw, str) else _coerce(key, FIELD_TYPES[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{where}{key}: {exc}") from None
    return cfg.replace(**updates)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    cfg = base or TrainConfig()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            cfg = config_from_pairs({key: raw}, cfg, where=f"{path}:{lineno}: ")
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# -- optimizer pieces ----------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float, coeff: float = 0.5, offset: float = 0.1) -> float:
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr * (offset + 2 * coeff)
    return base_lr * (offset + coeff * (1.0 + math.cos(math.pi * step / total_steps)))


def sgd_update(params: list[np.ndarray], grads: list[np.ndarray], velocities: list[np.ndarray],
               lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> list[np.ndarray]:
    """In place: ``v <- momentum v + grad + wd param``; ``param <- param - lr v``."""
    if not (len(params) == len(grads) == len(velocities)):
        raise MatrixError("parameter / gradient / velocity counts differ")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise MatrixError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


# -- state ---------------------------------------------------------------------

@dataclass
class TrainState:
    pair: MomentumPair
    bank_s: MemoryBank
    bank_t: MemoryBank
    velocities: list[np.ndarray]
    rng: np.random.Generator
    queue_s: ProbQueue
    queue_t: ProbQueue
    step: int = 0
    epoch: int = 0
    total_steps: int = 0


def _seed(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def init_state(cfg: TrainConfig, d_in: int, steps_per_epoch: int) -> TrainState:
    dims = (d_in,) + cfg.hidden_dims + (cfg.out_dim,)
    f = init_encoder(dims, seed=int(_seed(cfg.seed, 1).integers(2**63)))
    pair = MomentumPair.from_encoder(f, m=cfg.ema_m)
    bank_rng = _seed(cfg.seed, 2)
    bank_s = MemoryBank.random(cfg.out_dim, cfg.K, bank_rng)
    bank_t = MemoryBank.random(cfg.out_dim, cfg.K, bank_rng)
    return TrainState(
        pair=pair,
        bank_s=bank_s,
        bank_t=bank_t,
        velocities=[np.zeros_like(t) for t in f.tensors()],
        rng=_seed(cfg.seed, 3),
        queue_s=ProbQueue(cfg.K + 1, cfg.prob_queue),
        queue_t=ProbQueue(cfg.K + 1, cfg.prob_queue),
        total_steps=cfg.epochs * steps_per_epoch,
    )


def make_labels(p, queue: ProbQueue, cfg: TrainConfig) -> PseudoLabelMatrix:
    if not cfg.uniform_labels:
        return one_hot_labels(p.p.shape[0], p.p.shape[1])
    p_ext, span = extend_marginals(p, queue)
    labels = sinkhorn_labels(p_ext, cfg.xi, cfg.lam, cfg.sinkhorn_iters)
    queue.push(p)
    if p_ext.shape[1] == span.stop:
        return labels
    return PseudoLabelMatrix(labels.y[:, span], labels.xi, labels.lam, labels.iters)


def _divergence(msg: str, ps: np.ndarray, pt: np.ndarray) -> DivergenceError:
    bad = np.where(~np.all(np.isfinite(ps), axis=0) | ~np.all(np.isfinite(pt), axis=0))[0]
    cols = bad[:4] if bad.size else np.arange(min(2, ps.shape[1]))
    dump = {int(c): {"ps": ps[:6, c].tolist(), "pt": pt[:6, c].tolist()} for c in cols}
    return DivergenceError(f"divergence: {msg}; offending P columns (first rows): {json.dumps(dump)}")


def _unchecked_prob(q, k, bank, tau) -> np.ndarray:
    """Probability matrix without validation, used only to report a divergence."""
    with np.errstate(all="ignore"):
        z = np.vstack([np.sum(q * k, axis=0)[None, :], bank.T @ q]) / tau
        e = np.exp(z - np.max(z, axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)


def train_step(state: TrainState, batch, cfg: TrainConfig, spec: TransformSpec | None = None) -> dict:
    """One optimisation step on a ``d_in x N`` batch of raw samples; mutates ``state``."""
    spec = spec or cfg.transform_spec()
    f, g = state.pair.f, state.pair.g
    xs, xt = two_views(np.asarray(batch, dtype=np.float64), spec, state.rng)
    qs, tape_s = forward(f, xs)
    qt, tape_t = forward(f, xt)
    ks, _ = forward(g, xs)
    kt, _ = forward(g, xt)
    bank_s = state.bank_s.features
    bank_t = state.bank_t.features
    if not all(np.all(np.isfinite(a)) for a in (qs, qt, ks, kt, bank_s, bank_t)):
        raise _divergence("non-finite features", _unchecked_prob(qs, kt, bank_t, cfg.tau),
                          _unchecked_prob(qt, ks, bank_s, cfg.tau))
    ps = get_prob(qs, kt, bank_t, cfg.tau)
    pt = get_prob(qt, ks, bank_s, cfg.tau)
    ys = make_labels(ps, state.queue_s, cfg)
    yt = make_labels(pt, state.queue_t, cfg)
    rep = xmoco_loss(ps, pt, ys, yt, xsim_reg=cfg.xsim_reg)
    if not math.isfinite(rep.total):
        raise _divergence("loss is NaN/Inf", ps.p, pt.p)

    dqs = logits_backward(rep.grad_logits_s, kt, bank_t, cfg.tau)
    dqt = logits_backward(rep.grad_logits_t, ks, bank_s, cfg.tau)
    grad_s, _ = backward(f, tape_s, dqs)
    grad_t, _ = backward(f, tape_t, dqt)
    grads = [a + b for a, b in zip(grad_s.tensors(), grad_t.tensors())]
    grad_norm = math.sqrt(sum(float(np.sum(gr * gr)) for gr in grads))
    if not math.isfinite(grad_norm):
        raise _divergence("non-finite gradient", ps.p, pt.p)

    lr = cosine_lr(state.step, state.total_steps, cfg.lr)
    sgd_update(f.tensors(), grads, state.velocities, lr, cfg.sgd_momentum, cfg.weight_decay)
    momentum_update(state.pair)
    enqueue_dequeue(state.bank_s, ks)
    enqueue_dequeue(state.bank_t, kt)

    metrics = {"step": state.step, "epoch": state.epoch, "lr": lr, "loss": rep.total}
    metrics.update(rep.terms())
    metrics["grad_norm"] = grad_norm
    state.step += 1
    return metrics


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    header = {
        "format": "xmoco-checkpoint/1",
        "architecture": list(state.pair.f.dims),
        "m": state.pair.m,
        "tau": cfg.tau,
        "xi": cfg.xi,
        "lambda": cfg.lam,
        "K": cfg.K,
        "seed": cfg.seed,
        "step": state.step,
        "epoch": state.epoch,
        "total_steps": state.total_steps,
        "bank_s_cursor": state.bank_s.cursor,
        "bank_t_cursor": state.bank_t.cursor,
        "rng": state.rng.bit_generator.state,
        "config": cfg.to_dict(),
    }
    tensors = state.pair.f.named_tensors("f") + state.pair.g.named_tensors("g")
    tensors += [(f"v{i}", v) for i, v in enumerate(state.velocities)]
    tensors += [("bank_s", state.bank_s.features), ("bank_t", state.bank_t.features)]
    if cfg.prob_queue:
        tensors += [("queue_s", state.queue_s.columns), ("queue_t", state.queue_t.columns)]
    ckpt.save_tensors(path, header, tensors)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    header, t = ckpt.load_tensors(path)
    cfg = TrainConfig(**header["config"])
    depth = len(header["architecture"]) - 1

    def enc(prefix):
        return EncoderParams(
            [t[f"{prefix}.w{i}"].copy() for i in range(depth)],
            [t[f"{prefix}.b{i}"].copy() for i in range(depth)],
        )

    f, g = enc("f"), enc("g")
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    queue_s = ProbQueue(cfg.K + 1, cfg.prob_queue)
    queue_t = ProbQueue(cfg.K + 1, cfg.prob_queue)
    if cfg.prob_queue:
        queue_s.columns = t["queue_s"].copy()
        queue_t.columns = t["queue_t"].copy()
    state = TrainState(
        pair=MomentumPair(f=f, g=g, m=header["m"]),
        bank_s=MemoryBank(t["bank_s"].copy(), header["bank_s_cursor"]),
        bank_t=MemoryBank(t["bank_t"].copy(), header["bank_t_cursor"]),
        velocities=[t[f"v{i}"].copy() for i in range(2 * depth)],
        rng=rng,
        queue_s=queue_s,
        queue_t=queue_t,
        step=header["step"],
        epoch=header["epoch"],
        total_steps=header["total_steps"],
    )
    return state, cfg


# -- driver --------------------------------------------------------------------

def load_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.data_path:
        return load_delimited(cfg.data_path, has_labels=cfg.has_labels)
    return make_blobs(cfg.classes, cfg.per_class, cfg.d_in, cfg.separation, cfg.data_seed)


def _write_json(fh: IO[str] | None, obj: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(obj) + "\n")


@dataclass
class RunResult:
    state: TrainState
    config: TrainConfig
    dataset: Dataset
    metrics: list = field(default_factory=list)
    checkpoint: str | None = None


def run(cfg: TrainConfig, out_dir=None, dataset: Dataset | None = None, resume=None,
        metrics_name: str = "metrics.jsonl") -> RunResult:
    """Train for ``cfg.epochs`` epochs (or resume a checkpoint to that point).

    With ``out_dir`` set, per-step and per-epoch JSON lines go to
    ``metrics.jsonl`` and the final state to ``checkpoint.xmck``; periodic
    snapshots ``epoch_XXXX.xmck`` are written every ``ckpt_every`` epochs.
    """
    if resume is not None:
        state, saved = load_checkpoint(resume)
        cfg = saved.replace(epochs=cfg.epochs) if cfg.epochs != saved.epochs else saved
    cfg.validate()
    ds = dataset if dataset is not None else load_dataset(cfg)
    if ds.size < cfg.batch_size:
        raise ConfigError(f"batch_size: dataset has only {ds.size} samples")
    steps_per_epoch = ds.size // cfg.batch_size
    if resume is None:
        state = init_state(cfg, ds.dim, steps_per_epoch)
        rate = preservation_rate(ds, cfg.transform_spec(), _seed(cfg.seed, 4)) if np.unique(ds.labels).size > 1 else 1.0
        if rate < 0.99:
            log.warning("transform keeps the nearest-centroid class for only %.3f of views", rate)
    else:
        state.total_steps = cfg.epochs * steps_per_epoch

    result = RunResult(state=state, config=cfg, dataset=ds)
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, metrics_name), "w")
    spec = cfg.transform_spec()
    try:
        while state.epoch < cfg.epochs:
            t0 = time.perf_counter()
            losses = []
            for idx in epoch_batches(ds, cfg.batch_size, state.rng):
                m = train_step(state, ds.samples[:, idx], cfg, spec)
                m = {"type": "step", **m}
                losses.append(m["loss"])
                result.metrics.append(m)
                _write_json(fh, m)
            state.epoch += 1
            em = {"type": "epoch", "epoch": state.epoch, "steps": len(losses), "loss_mean": float(np.mean(losses))}
            result.metrics.append(em)
            _write_json(fh, em)
            log.info("epoch %d loss %.5f (%.2fs)", state.epoch, em["loss_mean"], time.perf_counter() - t0)
            if out_dir is not None and cfg.ckpt_every and state.epoch % cfg.ckpt_every == 0:
                save_checkpoint(os.path.join(out_dir, f"epoch_{state.epoch:04d}.xmck"), state, cfg)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        result.checkpoint = os.path.join(out_dir, "checkpoint.xmck")
        save_checkpoint(result.checkpoint, state, cfg)
    return result

