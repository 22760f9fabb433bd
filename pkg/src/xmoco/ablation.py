"""Shared-seed sweeps over xi, bank size K, and the two loss switches."""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass, field

from .eval import evaluate
from .training import TrainConfig, dump_config, load_dataset, run

log = logging.getLogger(__name__)

AXES = ("xi", "K", "loss-switches")

# (label, uniform_labels, xsim_reg)
SWITCH_GRID = (
    ("full", True, True),
    ("labels_only", True, False),
    ("xsim_only", False, True),
    ("classical", False, False),
)


@dataclass
class AblationRow:
    value: str
    knn_accuracy: float | None
    wall_time: float
    per_seed: list = field(default_factory=list)
    error: str = ""


def _variants(axis: str, values) -> list[tuple[str, dict]]:
    if axis == "xi":
        return [(repr(float(v)), {"xi": float(v)}) for v in values]
    if axis == "K":
        return [(str(int(v)), {"K": int(v)}) for v in values]
    if axis == "loss-switches":
        wanted = set(values) if values else None
        return [
            (name, {"uniform_labels": u, "xsim_reg": x})
            for name, u, x in SWITCH_GRID
            if wanted is None or name in wanted
        ]
    raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}")


def sweep(axis: str, values, cfg: TrainConfig, seeds=(None,), test_fraction: float = 0.25) -> list[AblationRow]:
    """One training + k-NN evaluation per (value, seed); the median over seeds is reported.

    A failing sub-run is recorded in its row and the sweep continues.
    """
    variants = _variants(axis, values)
    ds = load_dataset(cfg)
    rows = []
    for label, overrides in variants:
        accs = []
        t0 = time.perf_counter()
        error = ""
        for seed in seeds:
            sub = cfg.replace(**overrides) if seed is None else cfg.replace(seed=int(seed), **overrides)
            try:
                res = run(sub, dataset=ds)
                rep = evaluate(res.state.pair.f, ds.samples, ds.labels, k=sub.knn_k,
                               test_fraction=test_fraction, split_seed=cfg.data_seed)
                accs.append(rep.knn_accuracy)
            except Exception as exc:  # recorded per row
                log.warning("%s=%s seed=%s failed: %s", axis, label, seed, exc)
                error = f"{type(exc).__name__}: {exc}"
                break
        wall = time.perf_counter() - t0
        acc = statistics.median(accs) if accs and not error else None
        rows.append(AblationRow(label, acc, wall, accs, error))
        log.info("%s=%s knn=%s (%.1fs)", axis, label, acc, wall)
    return rows


def table_csv(axis: str, rows: list[AblationRow], cfg: TrainConfig, seeds) -> str:
    buf = io.StringIO()
    buf.write(f"# ablation axis = {axis}\n")
    buf.write(f"# seeds = {','.join(str(s) for s in seeds)}\n")
    for line in dump_config(cfg).splitlines():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "knn_accuracy", "wall_time", "per_seed", "error"])
    for r in rows:
        w.writerow([
            r.value,
            "" if r.knn_accuracy is None else repr(r.knn_accuracy),
            f"{r.wall_time:.3f}",
            ";".join(repr(a) for a in r.per_seed),
            r.error,
        ])
    return buf.getvalue()
