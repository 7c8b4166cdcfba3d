"""Quantization-aware layers and the small reference architectures.

A :class:`Model` owns a list of :class:`QuantLayer` (the quantizable linear
and conv weights), full-precision batchnorm parameters, and a topology
(``mlp``, ``cnn`` or ``resnet``). Each layer is in one of three modes:

* ``float``: plain weights, used for pretraining;
* ``bsq``: weights held as a :class:`~bitsift.bitrep.BitTensor` and run
  through the bit-plane STE;
* ``fixed``: plain weights quantized with DoReFa at a frozen precision.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Node, ShapeError, Tape
from .bitrep import BitTensor, represented_weights, to_bit_representation
from .regularizer import LayerStats
from .ste import ActQuantizer, act_quant_pact, act_quant_relu6, bit_weight, dorefa_weight

ARCHS = ("mlp", "cnn", "resnet")
FLOAT_BITS = 32


@dataclass
class ModelSpec:
    arch: str = "mlp"
    input_shape: tuple[int, ...] = (784,)
    num_classes: int = 10
    widths: tuple[int, ...] = (128,)
    blocks_per_stage: int = 2
    batchnorm: bool = True
    act_bits: int | None = 4
    first_last_act_bits: int | None = 8
    pact_threshold: int = 4
    pact_init_clip: float = 6.0
    pact_weight_decay: float = 1e-4
    n0: int = 8

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.n0 < 1:
            raise ValueError("n0 must be >= 1")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.arch == "mlp":
            return
        if len(self.input_shape) != 3:
            raise ShapeError(f"{self.arch} needs a (C, H, W) input shape, got {self.input_shape}")
        if not self.widths:
            raise ValueError(f"{self.arch} needs at least one width")
        if self.arch == "resnet":
            if self.blocks_per_stage < 1:
                raise ValueError("blocks_per_stage must be >= 1")
            for a, b in zip(self.widths, self.widths[1:]):
                if b < a or (b - a) % 2:
                    raise ShapeError("resnet stage widths must be non-decreasing with even steps")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d


@dataclass
class QuantLayer:
    layer_id: str
    kind: str
    weight: np.ndarray | None
    bias: np.ndarray | None = None
    bit_state: BitTensor | None = None
    bits: int | None = None
    act_quantizer: ActQuantizer | None = None
    stride: int = 1
    padding: int = 0

    @property
    def mode(self) -> str:
        if self.bit_state is not None:
            return "bsq"
        return "float" if self.bits is None else "fixed"

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return self.bit_state.shape if self.bit_state is not None else self.weight.shape

    @property
    def param_count(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def precision(self) -> int:
        if self.bit_state is not None:
            return self.bit_state.n
        return FLOAT_BITS if self.bits is None else self.bits

    def effective_weight(self) -> np.ndarray:
        """The weight the forward pass actually uses (quantized where applicable)."""
        tape = Tape()
        return _weight_node(_Ctx(tape, False), self).value


@dataclass
class Norm:
    gamma: np.ndarray
    beta: np.ndarray
    state: ag.BatchNormState


class _Ctx:
    def __init__(self, tape: Tape, training: bool):
        self.tape = tape
        self.training = training
        self.params: dict[str, Node] = {}

    def param(self, name: str, value: np.ndarray) -> Node:
        node = self.tape.leaf(value)
        self.params[name] = node
        return node


def _weight_node(ctx: _Ctx, layer: QuantLayer) -> Node:
    lid = layer.layer_id
    if layer.bit_state is not None:
        bt = layer.bit_state
        return bit_weight(ctx.tape, ctx.param(f"{lid}.pos", bt.pos), ctx.param(f"{lid}.neg", bt.neg), bt)
    w = ctx.param(f"{lid}.weight", layer.weight)
    if layer.bits is None:
        return w
    return dorefa_weight(w, layer.bits)


def _apply_layer(ctx: _Ctx, layer: QuantLayer, x: Node) -> Node:
    w = _weight_node(ctx, layer)
    b = ctx.param(f"{layer.layer_id}.bias", layer.bias) if layer.bias is not None else None
    if layer.kind == "linear":
        return ag.linear(x, w, b)
    return ag.conv2d(x, w, b, stride=layer.stride, padding=layer.padding)


def _activate(ctx: _Ctx, layer: QuantLayer, x: Node) -> Node:
    aq = layer.act_quantizer
    if aq is None:
        return ag.relu(x)
    if aq.kind == "relu6-uniform":
        return act_quant_relu6(x, aq.n_act)
    return act_quant_pact(x, ctx.param(f"{layer.layer_id}.clip", aq.clip_level), aq.n_act)


def _shortcut(x: Node, out_channels: int, stride: int) -> Node:
    """Parameter-free shortcut: spatial subsampling plus zero channel padding."""
    c = x.shape[1]
    if stride == 1 and out_channels == c:
        return x
    lo = (out_channels - c) // 2
    hi = out_channels - c - lo

    def forward(v):
        return np.pad(v[:, :, ::stride, ::stride], ((0, 0), (lo, hi), (0, 0), (0, 0)))

    def rule(g, v):
        gx = np.zeros_like(v)
        gx[:, :, ::stride, ::stride] = g[:, lo : lo + c]
        return (gx,)

    return x.tape.record("shortcut", [x], forward, rule)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Model:
    def __init__(self, spec: ModelSpec, layers: list[QuantLayer], norms: dict[str, Norm], blocks: list):
        self.spec = spec
        self.layers = layers
        self.norms = norms
        # resnet only: (conv1 index, conv2 index, out_channels, stride) per block
        self.blocks = blocks

    # ----- parameters -------------------------------------------------

    def layer(self, layer_id: str) -> QuantLayer:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(layer_id)

    def parameters(self) -> dict[str, np.ndarray]:
        """Every trainable array by name; the arrays are the live storage."""
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            lid = layer.layer_id
            if layer.bit_state is not None:
                out[f"{lid}.pos"] = layer.bit_state.pos
                out[f"{lid}.neg"] = layer.bit_state.neg
            else:
                out[f"{lid}.weight"] = layer.weight
            if layer.bias is not None:
                out[f"{lid}.bias"] = layer.bias
            if layer.act_quantizer is not None and layer.act_quantizer.kind == "pact":
                out[f"{lid}.clip"] = layer.act_quantizer.clip_level
        for name, norm in self.norms.items():
            out[f"{name}.gamma"] = norm.gamma
            out[f"{name}.beta"] = norm.beta
        return out

    def layer_stats(self) -> list[LayerStats]:
        return [LayerStats(l.layer_id, l.param_count, l.precision) for l in self.layers]

    def quantizable_param_count(self) -> int:
        return sum(l.param_count for l in self.layers)

    def other_param_count(self) -> int:
        """Biases, batchnorm affine parameters and PACT clips (never quantized)."""
        total = sum(v.size for v in self.parameters().values())
        return total - sum(
            v.size for k, v in self.parameters().items() if k.endswith((".weight", ".pos", ".neg"))
        )

    def num_parameters(self) -> int:
        return self.quantizable_param_count() + self.other_param_count()

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # ----- forward ----------------------------------------------------

    def forward(self, x, training: bool = False) -> tuple[Node, dict[str, Node]]:
        """Run a forward pass on a fresh tape; returns logits and parameter leaves."""
        x = np.asarray(x, dtype=np.float64)
        expected = self.spec.input_shape
        if x.ndim < 1 or x.shape[0] == 0:
            raise ShapeError("forward needs a non-empty batch")
        if self.spec.arch == "mlp":
            if int(np.prod(x.shape[1:])) != int(np.prod(expected)):
                raise ShapeError(f"batch item shape {x.shape[1:]} does not match {expected}")
            x = x.reshape(x.shape[0], -1)
        elif x.shape[1:] != expected:
            raise ShapeError(f"batch item shape {x.shape[1:]} does not match {expected}")
        ctx = _Ctx(Tape(), training)
        h = ctx.tape.leaf(x, "input")
        logits = getattr(self, f"_forward_{self.spec.arch}")(ctx, h)
        return logits, ctx.params

    def predict(self, x) -> np.ndarray:
        logits, _ = self.forward(x, training=False)
        return logits.value

    def _norm(self, ctx: _Ctx, name: str, x: Node) -> Node:
        norm = self.norms[name]
        return ag.batchnorm(
            x, ctx.param(f"{name}.gamma", norm.gamma), ctx.param(f"{name}.beta", norm.beta),
            norm.state, ctx.training,
        )

    def _forward_mlp(self, ctx: _Ctx, h: Node) -> Node:
        for layer in self.layers[:-1]:
            h = _activate(ctx, layer, _apply_layer(ctx, layer, h))
        return _apply_layer(ctx, self.layers[-1], h)

    def _forward_cnn(self, ctx: _Ctx, h: Node) -> Node:
        for layer in self.layers[:-1]:
            h = _apply_layer(ctx, layer, h)
            if self.spec.batchnorm:
                h = self._norm(ctx, f"{layer.layer_id}.bn", h)
            h = _activate(ctx, layer, h)
        return _apply_layer(ctx, self.layers[-1], ag.global_avg_pool(h))

    def _forward_resnet(self, ctx: _Ctx, h: Node) -> Node:
        stem = self.layers[0]
        h = _activate(ctx, stem, self._norm(ctx, f"{stem.layer_id}.bn", _apply_layer(ctx, stem, h)))
        for i1, i2, out_c, stride in self.blocks:
            c1, c2 = self.layers[i1], self.layers[i2]
            y = _activate(ctx, c1, self._norm(ctx, f"{c1.layer_id}.bn", _apply_layer(ctx, c1, h)))
            y = self._norm(ctx, f"{c2.layer_id}.bn", _apply_layer(ctx, c2, y))
            h = _activate(ctx, c2, ag.add(y, _shortcut(h, out_c, stride)))
        return _apply_layer(ctx, self.layers[-1], ag.global_avg_pool(h))


def build_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """Float model with He-normal weights, zero biases and identity batchnorm."""
    spec.validate()
    layers: list[QuantLayer] = []
    norms: dict[str, Norm] = {}
    blocks: list = []

    def add_norm(layer_id: str, channels: int) -> None:
        norms[f"{layer_id}.bn"] = Norm(np.ones(channels), np.zeros(channels), ag.BatchNormState.fresh(channels))

    def conv(layer_id: str, cin: int, cout: int, stride: int, with_bias: bool) -> QuantLayer:
        return QuantLayer(
            layer_id, "conv2d", _he_normal(rng, (cout, cin, 3, 3)),
            np.zeros(cout) if with_bias else None, stride=stride, padding=1,
        )

    if spec.arch == "mlp":
        dims = [int(np.prod(spec.input_shape)), *spec.widths, spec.num_classes]
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            layers.append(QuantLayer(f"fc{i}", "linear", _he_normal(rng, (b, a)), np.zeros(b)))
    elif spec.arch == "cnn":
        cin = spec.input_shape[0]
        for i, cout in enumerate(spec.widths):
            layer = conv(f"conv{i}", cin, cout, 1 if i == 0 else 2, not spec.batchnorm)
            layers.append(layer)
            if spec.batchnorm:
                add_norm(layer.layer_id, cout)
            cin = cout
        layers.append(QuantLayer("fc", "linear", _he_normal(rng, (spec.num_classes, cin)), np.zeros(spec.num_classes)))
    else:
        cin = spec.widths[0]
        layers.append(conv("stem", spec.input_shape[0], cin, 1, False))
        add_norm("stem", cin)
        for s, cout in enumerate(spec.widths):
            for k in range(spec.blocks_per_stage):
                stride = 2 if (s > 0 and k == 0) else 1
                c1 = conv(f"s{s}b{k}c1", cin, cout, stride, False)
                c2 = conv(f"s{s}b{k}c2", cout, cout, 1, False)
                layers += [c1, c2]
                add_norm(c1.layer_id, cout)
                add_norm(c2.layer_id, cout)
                blocks.append((len(layers) - 2, len(layers) - 1, cout, stride))
                cin = cout
        layers.append(QuantLayer("fc", "linear", _he_normal(rng, (spec.num_classes, cin)), np.zeros(spec.num_classes)))
    return Model(spec, layers, norms, blocks)


def _attach_act_quantizers(model: Model) -> None:
    spec = model.spec
    hidden = model.layers[:-1]
    for i, layer in enumerate(hidden):
        is_edge = i == 0 or i == len(hidden) - 1
        bits = spec.first_last_act_bits if is_edge and spec.first_last_act_bits else spec.act_bits
        if bits is None:
            layer.act_quantizer = None
            continue
        layer.act_quantizer = ActQuantizer.for_bits(
            bits, spec.pact_threshold, clip_level=spec.pact_init_clip,
            clip_weight_decay=spec.pact_weight_decay,
        )


def attach_bsq(model: Model, n0: int | None = None) -> Model:
    """Copy of ``model`` with every weight converted to ``n0``-bit planes.

    Biases and batchnorm stay in floating point. Activation quantizers are
    attached according to the model spec.
    """
    n0 = model.spec.n0 if n0 is None else n0
    out = model.copy()
    for layer in out.layers:
        w = layer.weight if layer.bit_state is None else represented_weights(layer.bit_state)
        layer.bit_state = to_bit_representation(w, n0)
        layer.weight = None
        layer.bits = None
    _attach_act_quantizers(out)
    return out


def fix_precisions(model: Model, precisions: dict[str, int]) -> Model:
    """Copy of ``model`` with each layer frozen at the given DoReFa precision.

    BSQ layers start from their represented weights; float layers keep their
    weights. A 0-bit layer has its weights set to exactly zero.
    """
    out = model.copy()
    missing = {l.layer_id for l in out.layers} ^ set(precisions)
    if missing:
        raise ValueError(f"scheme and model disagree on layers: {sorted(missing)}")
    for layer in out.layers:
        n = int(precisions[layer.layer_id])
        if n < 0:
            raise ValueError(f"{layer.layer_id}: negative precision")
        if layer.bit_state is not None:
            layer.weight = represented_weights(layer.bit_state)
            layer.bit_state = None
        if n == 0:
            layer.weight = np.zeros_like(layer.weight)
        layer.bits = n
    if all(l.act_quantizer is None for l in out.layers[:-1]):
        _attach_act_quantizers(out)
    return out
