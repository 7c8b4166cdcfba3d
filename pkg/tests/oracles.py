"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: scalar loops, exact rationals and
``struct`` parsing, sharing no code with the package under test.
"""

from __future__ import annotations

import gzip
import math
import struct
from fractions import Fraction

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def round_half_away_exact(q: Fraction) -> int:
    """Nearest integer to the rational ``q``, ties away from zero."""
    mag = abs(q)
    r = math.floor(mag + Fraction(1, 2))
    return r if q >= 0 else -r


def scalar_code(ws: float, n: int) -> int:
    """Magnitude code of one scaled weight: ``Round(|ws| (2**n - 1))`` in exact arithmetic."""
    return round_half_away_exact(abs(Fraction(ws)) * (2**n - 1))


def scalar_bitrep(w, n: int):
    """Brute-force conversion: (s, pos planes, neg planes) as nested Python lists."""
    flat = [float(v) for v in np.asarray(w, dtype=np.float64).ravel()]
    s = max((abs(v) for v in flat), default=0.0)
    if s == 0.0:
        s = 1.0
    pos = [[0.0] * len(flat) for _ in range(n)]
    neg = [[0.0] * len(flat) for _ in range(n)]
    for i, v in enumerate(flat):
        ws = v / s if v != 0 else 0.0
        code = scalar_code(ws, n)
        target = pos if ws >= 0 else neg
        for b in range(n):
            target[b][i] = float((code >> b) & 1)
    return s, pos, neg


def brute_norm(values) -> float:
    return math.sqrt(math.fsum(float(v) * float(v) for v in np.ravel(values)))


def brute_bgl(pos: np.ndarray, neg: np.ndarray) -> float:
    return math.fsum(brute_norm(np.concatenate([pos[b].ravel(), neg[b].ravel()])) for b in range(pos.shape[0]))


def parse_idx_struct(raw: bytes):
    """(dims, payload bytes) of an IDX file, via ``struct`` only."""
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    assert zero == 0 and dtype == 0x08
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    return dims, raw[4 + 4 * ndim :]
