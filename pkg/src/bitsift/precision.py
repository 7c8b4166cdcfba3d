"""Re-quantization of trained planes and precision adjustment.

After training, the planes are snapped back to signed integer codes of width
``n + 1`` (planes may hold values up to 2, so a carry into bit ``n`` is
possible). All-zero magnitude planes are stripped from the MSB end first and
then from the LSB end; the scale is compensated so every represented weight
is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitrep import BitTensor, decompose_bits, levels, plane_numerator, round_half_away
from .ste import _check_planes


@dataclass
class AdjustReport:
    """Outcome of one layer's adjustment.

    ``carried`` is set when the re-quantized codes occupied the widened bit
    ``n`` (a carry out of the trained planes), even if LSB stripping then
    brings the precision back to ``n`` or below.
    """

    layer_id: str
    n_before: int
    n_after: int
    s_before: float
    s_after: float
    msb_removed: int
    lsb_removed: int
    carried: bool


def requantize(bt: BitTensor) -> np.ndarray:
    """Signed integer codes ``Round(sum_b pos_b 2**b - sum_b neg_b 2**b)``."""
    _check_planes(bt)
    if bt.n == 0:
        return np.zeros(bt.shape, dtype=np.int64)
    return round_half_away(plane_numerator(bt.pos, bt.neg)).astype(np.int64)


def _trailing_zeros(x: int) -> int:
    return (x & -x).bit_length() - 1


def strip_zero_planes(codes, s: float, n_orig: int, step: float | None = None):
    """Drop empty MSB planes, then empty LSB planes, of ``(n_orig + 1)``-bit codes.

    Returns ``(codes', s', n', step', msb_removed, lsb_removed)`` where
    ``s' = s * 2**k * (2**n' - 1) / (2**n_orig - 1)`` for ``k`` removed LSB
    planes. ``step`` (``s / (2**n_orig - 1)`` if omitted) is scaled by ``2**k``
    exactly. All-zero codes give ``n' = 0`` and leave ``s`` alone.
    """
    codes = np.asarray(codes, dtype=np.int64)
    width = n_orig + 1
    mags = np.abs(codes)
    top = int(mags.max()).bit_length() if mags.size else 0
    if top > width:
        raise ValueError(f"codes need {top} bits, more than {width}")
    if step is None:
        step = s / levels(n_orig) if n_orig > 0 else s
    if top == 0:
        return np.zeros_like(codes), float(s), 0, float(step), width, 0
    msb_removed = width - top
    k = _trailing_zeros(int(np.bitwise_or.reduce(mags.ravel())))
    n_new = top - k
    new_codes = np.sign(codes) * (mags >> k)
    new_step = step * 2.0**k
    if k == 0 and n_new == n_orig:
        s_new = s
    else:
        s_new = s * 2.0**k * levels(n_new) / levels(n_orig)
    return new_codes, float(s_new), n_new, float(new_step), msb_removed, k


def resplit(codes, n: int, s: float, step: float | None = None) -> BitTensor:
    """Fresh sign-disjoint binary planes holding ``codes`` at precision ``n``."""
    codes = np.asarray(codes, dtype=np.int64)
    if np.any(np.abs(codes) > levels(n)):
        raise ValueError(f"codes exceed {n}-bit range")
    pos = decompose_bits(np.where(codes > 0, codes, 0), n)
    neg = decompose_bits(np.where(codes < 0, -codes, 0), n)
    return BitTensor(codes.shape, n, s, pos, neg, step)


def adjust_layer(bt: BitTensor, layer_id: str = "") -> tuple[BitTensor, AdjustReport]:
    codes = requantize(bt)
    new_codes, s_new, n_new, step_new, msb, lsb = strip_zero_planes(codes, bt.s, bt.n, bt.step)
    out = resplit(new_codes, n_new, s_new, step_new)
    report = AdjustReport(layer_id, bt.n, n_new, bt.s, s_new, msb, lsb, carried=n_new > 0 and msb == 0)
    return out, report
