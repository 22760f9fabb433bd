"""Checkpoint container: a JSON header, a tensor manifest, then XMC1 blocks.

Layout::

    XMCK1 <n_tensors>
    {"config": {...}, ...}          one line of JSON
    <name> <rows> <cols>            n_tensors manifest lines
    XMC1 <rows> <cols>\\n<f64 LE>   n_tensors matrix blocks, manifest order
"""

from __future__ import annotations

import json
import os
from typing import Iterable

import numpy as np

from .matrix import MatrixError, read_xmc1, write_xmc1

MAGIC = b"XMCK1"


def save_tensors(path, header: dict, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    tensors = [(name, np.atleast_2d(np.asarray(t, dtype=np.float64))) for name, t in tensors]
    for name, _ in tensors:
        if not name or any(c.isspace() for c in name):
            raise MatrixError(f"invalid tensor name {name!r}")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b" %d\n" % len(tensors))
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name, t in tensors:
            fh.write(b"%s %d %d\n" % (name.encode(), t.shape[0], t.shape[1]))
        for _, t in tensors:
            write_xmc1(fh, t)
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        first = fh.readline().split()
        if len(first) != 2 or first[0] != MAGIC:
            raise MatrixError(f"{path}: not an XMCK1 checkpoint")
        count = int(first[1])
        header = json.loads(fh.readline())
        manifest = []
        for _ in range(count):
            parts = fh.readline().split()
            if len(parts) != 3:
                raise MatrixError(f"{path}: malformed manifest line")
            manifest.append((parts[0].decode(), int(parts[1]), int(parts[2])))
        tensors = {}
        for name, rows, cols in manifest:
            m = read_xmc1(fh)
            if m.shape != (rows, cols):
                raise MatrixError(f"{path}: tensor {name} is {m.shape}, manifest says {(rows, cols)}")
            tensors[name] = m
        if fh.read(1):
            raise MatrixError(f"{path}: trailing bytes after last tensor")
    return header, tensors
