"""Mixed-precision quantization schemes and their JSON file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import jsonschema

from .regularizer import LayerStats

SCHEME_VERSION = 1
FLOAT_BITS = 32

SCHEME_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "layers", "bits_per_param", "compression_rate", "provenance"],
    "properties": {
        "schema_version": {"const": SCHEME_VERSION},
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["layer_id", "weight_bits", "scale", "activation_bits", "param_count", "skippable"],
                "properties": {
                    "layer_id": {"type": "string"},
                    "weight_bits": {"type": "integer", "minimum": 0},
                    "scale": {"type": "number", "minimum": 0},
                    "activation_bits": {"type": ["integer", "null"], "minimum": 1},
                    "param_count": {"type": "integer", "minimum": 1},
                    "skippable": {"type": "boolean"},
                },
            },
        },
        "bits_per_param": {"type": "number", "minimum": 0},
        "compression_rate": {"type": ["number", "null"]},
        "provenance": {
            "type": "object",
            "additionalProperties": False,
            "required": ["config_hash", "seed", "code_version"],
            "properties": {
                "config_hash": {"type": "string"},
                "seed": {"type": ["integer", "null"]},
                "code_version": {"type": "string"},
            },
        },
    },
}


class SchemeError(ValueError):
    pass


def bits_per_param(stats: Sequence[LayerStats]) -> float:
    total = sum(s.param_count for s in stats)
    return sum(s.param_count * s.precision for s in stats) / total


def compression_rate(bpp: float) -> float:
    """Compression against 32-bit floats; infinite for an all-zero model."""
    return FLOAT_BITS / bpp if bpp > 0 else math.inf


@dataclass
class LayerScheme:
    layer_id: str
    weight_bits: int
    scale: float
    activation_bits: int | None
    param_count: int
    skippable: bool = False

    def __post_init__(self):
        if self.skippable != (self.weight_bits == 0):
            raise SchemeError(f"{self.layer_id}: skippable must be set exactly for 0-bit layers")


@dataclass
class QuantScheme:
    layers: list[LayerScheme]
    provenance: dict = field(default_factory=dict)

    @property
    def stats(self) -> list[LayerStats]:
        return [LayerStats(l.layer_id, l.param_count, l.weight_bits) for l in self.layers]

    @property
    def bits_per_param(self) -> float:
        return bits_per_param(self.stats)

    @property
    def compression_rate(self) -> float:
        return compression_rate(self.bits_per_param)

    @property
    def precisions(self) -> dict[str, int]:
        return {l.layer_id: l.weight_bits for l in self.layers}

    @classmethod
    def from_model(cls, model, provenance: dict | None = None) -> "QuantScheme":
        layers = []
        for layer in model.layers:
            if layer.bit_state is not None:
                scale = layer.bit_state.s
            else:
                scale = float(abs(layer.weight).max()) if layer.weight.size else 0.0
            aq = layer.act_quantizer
            layers.append(LayerScheme(
                layer.layer_id, layer.precision, scale, aq.n_act if aq is not None else None,
                layer.param_count, layer.precision == 0,
            ))
        return cls(layers, dict(provenance or {}))

    def to_dict(self) -> dict:
        cr = self.compression_rate
        prov = {"config_hash": "", "seed": None, "code_version": ""}
        prov.update(self.provenance)
        return {
            "schema_version": SCHEME_VERSION,
            "layers": [
                {
                    "layer_id": l.layer_id,
                    "weight_bits": l.weight_bits,
                    "scale": l.scale,
                    "activation_bits": l.activation_bits,
                    "param_count": l.param_count,
                    "skippable": l.skippable,
                }
                for l in self.layers
            ],
            "bits_per_param": self.bits_per_param,
            "compression_rate": cr if math.isfinite(cr) else None,
            "provenance": prov,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        try:
            jsonschema.validate(d, SCHEME_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise SchemeError(f"{where}: {exc.message}") from exc
        layers = [LayerScheme(**l) for l in d["layers"]]
        scheme = cls(layers, dict(d["provenance"]))
        if abs(scheme.bits_per_param - d["bits_per_param"]) > 1e-9:
            raise SchemeError("stored bits_per_param does not match the layer records")
        stored_cr = d["compression_rate"]
        cr = scheme.compression_rate
        if stored_cr is None:
            if math.isfinite(cr):
                raise SchemeError("compression_rate missing for a non-empty scheme")
        elif not math.isfinite(cr) or abs(cr - stored_cr) > 1e-9:
            raise SchemeError(f"stored compression_rate {stored_cr} != recomputed {cr}")
        return scheme

    @classmethod
    def from_json(cls, text: str) -> "QuantScheme":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemeError(f"not valid JSON: {exc}") from exc
        return cls.from_dict(d)
