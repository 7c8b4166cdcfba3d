"""Bit-level group Lasso and the memory-aware reweighted training objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bitrep import BitTensor


@dataclass(frozen=True)
class LayerStats:
    layer_id: str
    param_count: int
    precision: int

    def __post_init__(self):
        if self.param_count <= 0:
            raise ValueError(f"{self.layer_id}: param_count must be positive")
        if self.precision < 0:
            raise ValueError(f"{self.layer_id}: precision must be non-negative")


@dataclass
class LossBreakdown:
    ce: float
    per_layer_bgl: list[float]
    coefficients: list[float]
    alpha: float
    total: float = field(default=float("nan"))

    @property
    def regularizer(self) -> float:
        return float(sum(c * g for c, g in zip(self.coefficients, self.per_layer_bgl)))


def plane_norms(bt: BitTensor) -> np.ndarray:
    """Euclidean norm of ``[pos_b; neg_b]`` for every bit ``b``."""
    if bt.n == 0:
        return np.zeros(0)
    v = np.concatenate([bt.pos.reshape(bt.n, -1), bt.neg.reshape(bt.n, -1)], axis=1)
    # scale by the largest entry so tiny nonzero planes do not underflow to norm 0
    m = np.max(np.abs(v), axis=1) if v.shape[1] else np.zeros(bt.n)
    safe = np.where(m > 0, m, 1.0)
    return m * np.sqrt(np.sum((v / safe[:, None]) ** 2, axis=1))


def bit_group_lasso(bt: BitTensor) -> float:
    return float(np.sum(plane_norms(bt)))


def bgl_subgradient(bt: BitTensor) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`bit_group_lasso` w.r.t. the pos and neg planes.

    A plane group with zero norm gets a zero subgradient.
    """
    norms = plane_norms(bt)
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    inv = inv.reshape((bt.n,) + (1,) * len(bt.shape))
    return bt.pos * inv, bt.neg * inv


def reweigh_coefficients(stats: Sequence[LayerStats]) -> list[float]:
    """``param_count_l * precision_l / sum_k param_count_k`` per layer."""
    if not stats:
        raise ValueError("need at least one layer")
    total = sum(st.param_count for st in stats)
    return [st.param_count * st.precision / total for st in stats]


def total_loss(ce: float, stats: Sequence[LayerStats], bgls: Sequence[float], alpha: float,
               coefficients: Sequence[float] | None = None) -> LossBreakdown:
    """Assemble ``ce + alpha * sum_l coeff_l * bgl_l``.

    ``coefficients`` defaults to the reweighted ones from ``stats``; pass
    explicit values to train without reweighing or with frozen coefficients.
    """
    if len(stats) != len(bgls):
        raise ValueError(f"{len(stats)} layer stats but {len(bgls)} regularizer values")
    coeffs = list(reweigh_coefficients(stats) if coefficients is None else coefficients)
    if len(coeffs) != len(bgls):
        raise ValueError(f"{len(coeffs)} coefficients but {len(bgls)} regularizer values")
    out = LossBreakdown(float(ce), [float(g) for g in bgls], coeffs, float(alpha))
    out.total = out.ce + out.alpha * out.regularizer
    return out
