"""Eager, taped reverse-mode autodiff over float64 numpy arrays.

Every operation computes its output immediately and appends a node to a
:class:`Tape`. :func:`backward` walks the tape in reverse and returns a
mapping from node id to gradient. Custom backward rules (the straight-through
estimators) are ordinary nodes created with :meth:`Tape.record`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Node",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "sum_all",
    "reshape",
    "relu",
    "linear",
    "conv2d",
    "BatchNormState",
    "batchnorm",
    "global_avg_pool",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


BackwardRule = Callable[..., Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Node:
    id: int
    op_kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward_rule: BackwardRule | None
    tape: "Tape" = field(repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Append-only record of the nodes of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def leaf(self, value, op_kind: str = "leaf") -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), op_kind, (), arr, None, self)
        self.nodes.append(node)
        return node

    def record(
        self,
        op_kind: str,
        inputs: Sequence[Node],
        forward_fn: Callable[..., np.ndarray],
        backward_rule: BackwardRule,
    ) -> Node:
        """Run ``forward_fn`` on the input values and tape the result.

        ``backward_rule(grad_out, *input_values)`` must return one gradient per
        input (``None`` for no contribution), each shaped like its input.
        """
        for node in inputs:
            if node.tape is not self:
                raise ValueError(f"{op_kind}: input node {node.id} belongs to another tape")
        values = [node.value for node in inputs]
        out = np.asarray(forward_fn(*values), dtype=np.float64)
        node = Node(len(self.nodes), op_kind, tuple(n.id for n in inputs), out, backward_rule, self)
        self.nodes.append(node)
        return node


Gradients = dict[int, np.ndarray]


def backward(loss: Node) -> Gradients:
    """Gradient of the scalar ``loss`` with respect to every node it depends on."""
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    tape = loss.tape
    grads: Gradients = {loss.id: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node.backward_rule is None:
            continue
        values = [tape.nodes[i].value for i in node.inputs]
        in_grads = node.backward_rule(g, *values)
        if len(in_grads) != len(node.inputs):
            raise ShapeError(
                f"{node.op_kind}: backward returned {len(in_grads)} gradients for {len(node.inputs)} inputs"
            )
        for i, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            expected = tape.nodes[i].value.shape
            if gi.shape != expected:
                raise ShapeError(
                    f"{node.op_kind}: gradient for input {i} has shape {gi.shape}, expected {expected}"
                )
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    # Nodes that do not influence the loss still get an explicit zero.
    for node in tape.nodes[: loss.id + 1]:
        if node.id not in grads:
            grads[node.id] = np.zeros_like(node.value)
    return grads


def _same_shape(kind: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: expected matching shapes, got {a.shape} and {b.shape}")


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return a.tape.record("add", [a, b], np.add, lambda g, x, y: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return a.tape.record("sub", [a, b], np.subtract, lambda g, x, y: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return a.tape.record("mul", [a, b], np.multiply, lambda g, x, y: (g * y, g * x))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a.tape.record("matmul", [a, b], np.matmul, lambda g, x, y: (g @ y.T, x.T @ g))


def sum_all(a: Node) -> Node:
    return a.tape.record(
        "sum", [a], lambda x: np.sum(x), lambda g, x: (np.broadcast_to(g, x.shape).copy(),)
    )


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    try:
        target = np.empty(a.shape).reshape(shape).shape
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return a.tape.record(
        "reshape", [a], lambda x: x.reshape(target), lambda g, x: (g.reshape(x.shape),)
    )


def relu(a: Node) -> Node:
    # Gradient at exactly zero is taken as zero.
    return a.tape.record("relu", [a], lambda x: np.maximum(x, 0.0), lambda g, x: (g * (x > 0),))


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """``x @ w.T + b`` with ``w`` shaped (out_features, in_features)."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape}, expected {(w.shape[0],)}")

    if b is None:
        return x.tape.record(
            "linear", [x, w], lambda xv, wv: xv @ wv.T, lambda g, xv, wv: (g @ wv, g.T @ xv)
        )
    return x.tape.record(
        "linear",
        [x, w, b],
        lambda xv, wv, bv: xv @ wv.T + bv,
        lambda g, xv, wv, bv: (g @ wv, g.T @ xv, g.sum(axis=0)),
    )


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Node, w: Node, b: Node | None = None, stride: int = 1, padding: int = 0) -> Node:
    """Direct 2-D cross-correlation, NCHW input and (O, C, kh, kw) kernel."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ck, kh, kw = w.shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected {(o,)}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))

    def windows(xv):
        xp = np.pad(xv, pad)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        return win[:, :, ::stride, ::stride][:, :, :ho, :wo]

    def forward(xv, wv, bv=None):
        out = np.einsum("nchwij,ocij->nohw", windows(xv), wv, optimize=True)
        if bv is not None:
            out = out + bv[None, :, None, None]
        return out

    def rule(g, xv, wv, bv=None):
        gw = np.einsum("nohw,nchwij->ocij", g, windows(xv), optimize=True)
        gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("nohw,oc->nchw", g, wv[:, :, i, j], optimize=True)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        if bv is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = [x, w] if b is None else [x, w, b]
    return x.tape.record("conv2d", inputs, forward, rule)


@dataclass
class BatchNormState:
    """Running statistics of a batchnorm layer, kept in full precision."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm(x: Node, gamma: Node, beta: Node, state: BatchNormState, training: bool) -> Node:
    """Per-channel normalization over (N, C) or (N, C, H, W) input.

    In training mode the batch statistics are used (biased variance) and the
    running statistics are updated with the unbiased variance. In inference
    mode the running statistics are used and nothing is updated.
    """
    if x.value.ndim not in (2, 4):
        raise ShapeError(f"batchnorm: expected 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape {(c,)}")
    axes = (0,) if x.value.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.value.ndim == 2 else (1, c, 1, 1)
    count = x.value.size // c
    if count == 0:
        raise ShapeError("batchnorm: empty batch")

    if training:
        mean = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    mean_b, inv_b = mean.reshape(bshape), inv_std.reshape(bshape)

    def forward(xv, gv, bv):
        return (xv - mean_b) * inv_b * gv.reshape(bshape) + bv.reshape(bshape)

    def rule(g, xv, gv, bv):
        xhat = (xv - mean_b) * inv_b
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        gxhat = g * gv.reshape(bshape)
        if training:
            gx = inv_b / count * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_b
        return gx, g_gamma, g_beta

    return x.tape.record("batchnorm", [x, gamma, beta], forward, rule)


def global_avg_pool(x: Node) -> Node:
    if x.value.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def rule(g, xv):
        return (np.broadcast_to(g[:, :, None, None] / hw, xv.shape).copy(),)

    return x.tape.record("global_avg_pool", [x], lambda xv: xv.mean(axis=(2, 3)), rule)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Node, labels) -> Node:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.value.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy: empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape}, expected {(n,)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy: labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    rows = np.arange(n)

    def forward(z):
        return -log_softmax(z)[rows, labels].mean()

    def rule(g, z):
        p = np.exp(log_softmax(z))
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return logits.tape.record("cross_entropy", [logits], forward, rule)
