"""Straight-through estimators for bit-plane training, DoReFa finetuning and
activation quantization, as custom-gradient nodes on the autograd tape."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autograd import Node, Tape
from .bitrep import PLANE_MAX, BitTensor, levels, plane_numerator, round_half_away

ACT_KINDS = ("relu6-uniform", "pact")
RELU6_CEILING = 6.0


def _check_planes(bt: BitTensor) -> None:
    for planes in (bt.pos, bt.neg):
        if planes.size and (planes.min() < 0.0 or planes.max() > PLANE_MAX):
            raise ValueError("bit plane values outside [0, 2]; trimming step missed")


def bit_ste_forward(bt: BitTensor) -> np.ndarray:
    """``W_q = Round(sum_b (pos_b - neg_b) 2**b) / (2**n - 1)``; the layer uses ``s * W_q``."""
    _check_planes(bt)
    if bt.n == 0:
        return np.zeros(bt.shape)
    return round_half_away(plane_numerator(bt.pos, bt.neg)) / levels(bt.n)


def ste_factor(b: int, n: int) -> Fraction:
    if not 0 <= b < n:
        raise ValueError(f"bit index {b} out of range for {n} bits")
    return Fraction(1 << b, levels(n))


def bit_ste_backward(grad_wq, b: int, n: int):
    """Gradient reaching plane ``b`` from the gradient w.r.t. ``W_q``.

    The factor is ``2**b / (2**n - 1)``. Object arrays (e.g. of Fractions) are
    scaled by the exact rational; float arrays by its correctly rounded value.
    The negative plane receives the negation of this.
    """
    factor = ste_factor(b, n)
    grad_wq = np.asarray(grad_wq)
    if grad_wq.dtype == object:
        return grad_wq * factor
    return grad_wq * float(factor)


def bit_weight(tape: Tape, pos: Node, neg: Node, bt: BitTensor) -> Node:
    """Tape node producing ``s * W_q`` from the plane leaves ``pos`` and ``neg``.

    Computed as ``step * Round(numerator)`` so a precision adjustment, which
    rescales ``step`` by a power of two and the codes by its inverse, leaves
    the result bitwise unchanged.
    """
    n, step = bt.n, bt.step
    if n == 0:
        return tape.record(
            "bit_ste", [pos, neg], lambda p, q: np.zeros(bt.shape), lambda g, p, q: (None, None)
        )
    bit_scale = (step * 2.0 ** np.arange(n)).reshape((n,) + (1,) * len(bt.shape))

    def forward(p, q):
        if p.min() < 0.0 or p.max() > PLANE_MAX or q.min() < 0.0 or q.max() > PLANE_MAX:
            raise ValueError("bit plane values outside [0, 2]; trimming step missed")
        return step * round_half_away(plane_numerator(p, q))

    def rule(g, p, q):
        # d(s W_q)/d pos_b = s * 2**b / (2**n - 1) = step * 2**b
        gp = bit_scale * g[None, ...]
        return gp, -gp

    return tape.record("bit_ste", [pos, neg], forward, rule)


def dorefa_quantize(w, n: int) -> np.ndarray:
    """``Round(w (2**n - 1)) / (2**n - 1)`` with ``w`` clamped to ``[0, 1]``."""
    w = np.clip(np.asarray(w, dtype=np.float64), 0.0, 1.0)
    return round_half_away(w * levels(n)) / levels(n)


def dorefa_ste(x: Node, n: int) -> Node:
    """DoReFa quantizer on magnitudes in ``[0, 1]``; the gradient passes through unchanged."""
    if n < 1:
        raise ValueError(f"precision must be >= 1, got {n}")
    return x.tape.record("dorefa_ste", [x], lambda v: dorefa_quantize(v, n), lambda g, v: (g,))


def dorefa_weight(w: Node, n: int) -> Node:
    """Fixed-precision weight for finetuning.

    Per step, ``s = max|W|``, the magnitude ``|W| / s`` is quantized to ``n``
    bits and the sign and scale are multiplied back. Straight-through: the
    gradient w.r.t. ``W`` equals the gradient w.r.t. the quantized weight.
    A 0-bit layer yields zeros and no gradient.
    """
    if n == 0:
        return w.tape.record("dorefa_weight", [w], lambda v: np.zeros_like(v), lambda g, v: (None,))

    def forward(v):
        s = np.max(np.abs(v)) if v.size else 0.0
        if s == 0.0:
            return np.zeros_like(v)
        return np.sign(v) * s * dorefa_quantize(np.abs(v) / s, n)

    return w.tape.record("dorefa_weight", [w], forward, lambda g, v: (g,))


@dataclass
class ActQuantizer:
    kind: str
    n_act: int
    clip_level: float | np.ndarray = RELU6_CEILING
    clip_weight_decay: float = 1e-4

    def __post_init__(self):
        if self.kind not in ACT_KINDS:
            raise ValueError(f"unknown activation quantizer {self.kind!r}")
        if self.n_act < 1:
            raise ValueError(f"activation precision must be >= 1, got {self.n_act}")
        # 0-d array so the optimizer can update it in place.
        self.clip_level = np.array(float(self.clip_level))
        if not self.clip_level > 0:
            raise ValueError(f"clip level must be positive, got {float(self.clip_level)}")

    @classmethod
    def for_bits(cls, n_act: int, pact_threshold: int = 4, **kw) -> "ActQuantizer":
        """ReLU6 quantizer at ``n_act >= pact_threshold`` bits, PACT below."""
        kind = "relu6-uniform" if n_act >= pact_threshold else "pact"
        return cls(kind, n_act, **kw)


def uniform_act_quantize(x, ceiling: float, n_act: int) -> np.ndarray:
    y = np.clip(np.asarray(x, dtype=np.float64), 0.0, ceiling)
    return round_half_away(y / ceiling * levels(n_act)) * ceiling / levels(n_act)


def act_quant_relu6(x: Node, n_act: int) -> Node:
    """Clamp to ``[0, 6]`` and quantize uniformly; gradient passes only inside ``(0, 6)``."""
    if n_act < 1:
        raise ValueError(f"activation precision must be >= 1, got {n_act}")

    def rule(g, v):
        return (g * ((v > 0.0) & (v < RELU6_CEILING)),)

    return x.tape.record(
        "act_relu6", [x], lambda v: uniform_act_quantize(v, RELU6_CEILING, n_act), rule
    )


def act_quant_pact(x: Node, clip: Node, n_act: int) -> Node:
    """PACT: clamp to ``[0, clip]`` then quantize.

    ``clip`` is a scalar node. Its gradient is the sum of upstream gradients
    over elements with ``x >= clip``.
    """
    if clip.value.shape != ():
        raise ValueError("PACT clip level must be a scalar")
    if not clip.value > 0:
        raise ValueError(f"PACT clip level must be positive, got {float(clip.value)}")

    def rule(g, v, a):
        inside = (v > 0.0) & (v < a)
        return g * inside, np.sum(g * (v >= a))

    return x.tape.record(
        "act_pact", [x, clip], lambda v, a: uniform_act_quantize(v, float(a), n_act), rule
    )
