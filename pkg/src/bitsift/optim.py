"""SGD with momentum and weight decay over named numpy arrays."""

from __future__ import annotations

import numpy as np


class SGD:
    """``buf = momentum * buf + (g + wd * p)``; ``p -= lr * buf``, in place.

    ``decay`` overrides the weight decay for individual parameter names.
    """

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 decay: dict[str, float] | None = None):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay = dict(decay or {})
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            wd = self.decay.get(name, self.weight_decay)
            if wd:
                g = g + wd * p
            buf = self.buffers.get(name)
            if buf is None or buf.shape != p.shape:
                buf = np.array(g, dtype=np.float64, copy=True)
            else:
                buf *= self.momentum
                buf += g
            self.buffers[name] = buf
            p -= self.lr * buf

    def reset(self, names) -> None:
        for name in names:
            self.buffers.pop(name, None)
