"""Conversion of float weights to trainable bit planes and back.

A layer's weight ``W`` is stored as ``s`` (dynamic range), precision ``n`` and
two stacks of planes, ``pos`` and ``neg``, each shaped ``(n, *W.shape)`` with
plane ``b`` holding bit ``b`` (LSB first). The represented weight is::

    W = s / (2**n - 1) * sum_b (pos[b] - neg[b]) * 2**b

Planes are exactly binary right after conversion and relax to ``[0, 2]``
during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PLANE_MAX = 2.0


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    # x - trunc(x) is exact in floating point; floor(|x| + 0.5) is not
    # (0.49999999999999994 + 0.5 rounds up to 1.0).
    t = np.trunc(x)
    return t + np.sign(x) * (np.abs(x - t) >= 0.5)


def levels(n: int) -> int:
    """Largest code of an ``n``-bit magnitude, ``2**n - 1``."""
    return (1 << n) - 1


@dataclass
class BitTensor:
    """Bit-level state of one layer's weights.

    ``step`` is the real value of one code unit, ``s / (2**n - 1)``. It is
    kept explicitly because precision adjustment rescales it by an exact power
    of two, which keeps ``step * code`` bitwise stable across adjustments;
    recomputing it from ``s`` would not.
    """

    shape: tuple[int, ...]
    n: int
    s: float
    pos: np.ndarray
    neg: np.ndarray
    step: float | None = None

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.n = int(self.n)
        self.s = float(self.s)
        if self.step is None:
            self.step = self.s / levels(self.n) if self.n > 0 else self.s
        self.step = float(self.step)
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape((self.n, *self.shape))
        self.neg = np.asarray(self.neg, dtype=np.float64).reshape((self.n, *self.shape))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def copy(self) -> "BitTensor":
        return BitTensor(self.shape, self.n, self.s, self.pos.copy(), self.neg.copy(), self.step)

    def check(self) -> None:
        """Raise ValueError if the state breaks the training-time invariants."""
        if self.n < 0:
            raise ValueError(f"negative precision {self.n}")
        if not (np.isfinite(self.s) and self.s >= 0):
            raise ValueError(f"invalid scale {self.s}")
        for name, planes in (("pos", self.pos), ("neg", self.neg)):
            if planes.shape != (self.n, *self.shape):
                raise ValueError(f"{name} planes have shape {planes.shape}, expected {(self.n, *self.shape)}")
            if planes.size and not (np.all(planes >= 0.0) and np.all(planes <= PLANE_MAX)):
                raise ValueError(f"{name} plane values outside [0, {PLANE_MAX}]")

    def is_binary(self) -> bool:
        return bool(np.all((self.pos == 0) | (self.pos == 1)) and np.all((self.neg == 0) | (self.neg == 1)))


def extract_scale(w) -> tuple[float, np.ndarray]:
    """Split ``w`` into ``s = max|w|`` and ``w / s``; an all-zero tensor gets ``s = 1``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite values")
    s = float(np.max(np.abs(w))) if w.size else 0.0
    if s == 0.0:
        return 1.0, np.zeros_like(w)
    return s, w / s


@dataclass
class SignSplit:
    pos: np.ndarray
    neg: np.ndarray


def sign_split(ws) -> SignSplit:
    ws = np.asarray(ws, dtype=np.float64)
    if np.any(np.abs(ws) > 1.0):
        raise ValueError("scaled weights must lie in [-1, 1]")
    pos = np.where(ws >= 0, ws, 0.0)
    neg = np.where(ws < 0, -ws, 0.0)
    return SignSplit(pos, neg)


def quantize_uniform(x, n: int) -> np.ndarray:
    """Integer codes ``Round(x * (2**n - 1))`` for ``x`` in ``[0, 1]``."""
    if n < 1:
        raise ValueError(f"precision must be >= 1, got {n}")
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("quantize_uniform expects values in [0, 1]")
    # x * (2**n - 1) = x * 2**n - x. The scaling by 2**n is exact, and the
    # two-sum error term e makes p + e the exact product, so a float product
    # that lands on a half only by rounding is pulled back to the true side.
    scaled = x * float(2**n)
    p = scaled - x
    back = p - scaled
    e = (scaled - (p - back)) + (-x - back)
    r = round_half_away(p)
    r = np.where((p - np.trunc(p) == 0.5) & (e < 0), r - 1, r)
    return r.astype(np.int64)


def decompose_bits(codes, n: int) -> np.ndarray:
    """Binary planes of non-negative ``codes``, shaped ``(n, *codes.shape)``, LSB first."""
    codes = np.asarray(codes)
    if not np.issubdtype(codes.dtype, np.integer):
        raise ValueError("codes must be integers")
    codes = codes.astype(np.int64)
    if np.any(codes < 0) or np.any(codes > levels(n)):
        raise ValueError(f"codes out of range for {n} bits")
    bits = np.arange(n, dtype=np.int64).reshape((n,) + (1,) * codes.ndim)
    return ((codes[None, ...] >> bits) & 1).astype(np.float64)


def recompose_bits(planes) -> np.ndarray:
    """Inverse of :func:`decompose_bits` for exactly binary planes."""
    planes = np.asarray(planes, dtype=np.float64)
    n = planes.shape[0]
    weights = (2.0 ** np.arange(n)).reshape((n,) + (1,) * (planes.ndim - 1))
    return (planes * weights).sum(axis=0)


def to_bit_representation(w, n: int) -> BitTensor:
    if n < 1:
        raise ValueError(f"precision must be >= 1, got {n}")
    w = np.asarray(w, dtype=np.float64)
    s, ws = extract_scale(w)
    split = sign_split(ws)
    pos = decompose_bits(quantize_uniform(split.pos, n), n)
    neg = decompose_bits(quantize_uniform(split.neg, n), n)
    return BitTensor(w.shape, n, s, pos, neg)


def plane_numerator(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Unrounded ``sum_b (pos[b] - neg[b]) * 2**b``.

    Shared by the training forward pass and re-quantization so both round the
    very same float.
    """
    if pos.shape[0] == 0:
        return np.zeros(pos.shape[1:])
    return recompose_bits(pos - neg)


def represented_weights(bt: BitTensor) -> np.ndarray:
    """Exact weight encoded by the planes, without rounding."""
    if bt.n == 0:
        return np.zeros(bt.shape)
    return bt.step * plane_numerator(bt.pos, bt.neg)
