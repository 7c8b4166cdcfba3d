"""Versioned binary checkpoints.

Layout (little-endian)::

    magic    8 bytes  b"BITSIFT\\x00"
    version  u32
    count    u32      number of sections
    section  tag (4 bytes) | length u64 | crc32 u32 | payload

Sections, in order: ``SPEC`` (model spec JSON), ``LAYR`` (per-layer
metadata: mode, precision, scale, step), ``PLAN`` (weights or bit planes),
``PARM`` (biases, batchnorm, PACT clips), ``OPTM`` (momentum buffers),
``RNGS`` (epoch and generator state). Array sections hold a u32-prefixed JSON
index of ``[name, shape]`` followed by raw float64 data. JSON is written with
sorted keys so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitrep import BitTensor
from .models import Model, ModelSpec, build_model
from .ste import ActQuantizer

MAGIC = b"BITSIFT\x00"
VERSION = 1
SECTIONS = (b"SPEC", b"LAYR", b"PLAN", b"PARM", b"OPTM", b"RNGS")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointInvariantError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: Model
    epoch: int = 0
    rng_state: dict | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    index = [[name, list(np.shape(a))] for name, a in arrays.items()]
    head = _json(index)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return struct.pack("<I", len(head)) + head + body


def _unpack_arrays(payload: bytes, tag: str) -> dict[str, np.ndarray]:
    try:
        (hlen,) = struct.unpack_from("<I", payload, 0)
        index = json.loads(payload[4 : 4 + hlen])
        out, offset = {}, 4 + hlen
        for name, shape in index:
            count = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * count > len(payload):
                raise CheckpointCorruptError(f"{tag}: array {name} runs past the section end")
            out[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * count
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointCorruptError(f"{tag}: unreadable array index ({exc})") from exc
    if offset != len(payload):
        raise CheckpointCorruptError(f"{tag}: {len(payload) - offset} trailing bytes")
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    layers, planes, params = [], {}, {}
    for layer in model.layers:
        lid = layer.layer_id
        aq = layer.act_quantizer
        meta = {
            "layer_id": lid,
            "kind": layer.kind,
            "mode": layer.mode,
            "stride": layer.stride,
            "padding": layer.padding,
            "bits": layer.bits,
            "has_bias": layer.bias is not None,
            "act": None if aq is None else {
                "kind": aq.kind, "n_act": aq.n_act, "clip_weight_decay": aq.clip_weight_decay,
            },
        }
        if layer.bit_state is not None:
            bt = layer.bit_state
            meta.update(n=bt.n, s=bt.s, step=bt.step, shape=list(bt.shape))
            planes[f"{lid}.pos"] = bt.pos
            planes[f"{lid}.neg"] = bt.neg
        else:
            planes[f"{lid}.weight"] = layer.weight
        if layer.bias is not None:
            params[f"{lid}.bias"] = layer.bias
        if aq is not None:
            params[f"{lid}.clip"] = aq.clip_level
        layers.append(meta)
    for name, norm in model.norms.items():
        params[f"{name}.gamma"] = norm.gamma
        params[f"{name}.beta"] = norm.beta
        params[f"{name}.running_mean"] = norm.state.running_mean
        params[f"{name}.running_var"] = norm.state.running_var
    payloads = {
        b"SPEC": _json(model.spec.to_dict()),
        b"LAYR": _json(layers),
        b"PLAN": _pack_arrays(planes),
        b"PARM": _pack_arrays(params),
        b"OPTM": _pack_arrays(dict(sorted(ckpt.optimizer.items()))),
        b"RNGS": _json({"epoch": ckpt.epoch, "rng_state": ckpt.rng_state}),
    }
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(SECTIONS)))
    for tag in SECTIONS:
        data = payloads[tag]
        out.write(tag)
        out.write(struct.pack("<QI", len(data), zlib.crc32(data)))
        out.write(data)
    return out.getvalue()


def _read_sections(raw: bytes) -> dict[bytes, bytes]:
    if raw[:8] != MAGIC:
        raise CheckpointCorruptError("not a bitsift checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointCorruptError("truncated header")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    sections, pos = {}, 16
    for _ in range(count):
        if pos + 16 > len(raw):
            raise CheckpointCorruptError("truncated section header")
        tag = raw[pos : pos + 4]
        length, crc = struct.unpack_from("<QI", raw, pos + 4)
        pos += 16
        if pos + length > len(raw):
            raise CheckpointCorruptError(f"section {tag!r} claims {length} bytes, file ends first")
        data = raw[pos : pos + length]
        if zlib.crc32(data) != crc:
            raise CheckpointCorruptError(f"section {tag!r} failed its checksum")
        sections[tag] = data
        pos += length
    if pos != len(raw):
        raise CheckpointCorruptError(f"{len(raw) - pos} trailing bytes after the last section")
    missing = [t for t in SECTIONS if t not in sections]
    if missing:
        raise CheckpointCorruptError(f"missing sections {missing}")
    return sections


def from_bytes(raw: bytes) -> Checkpoint:
    sec = _read_sections(raw)
    try:
        spec_d = json.loads(sec[b"SPEC"])
        layers_meta = json.loads(sec[b"LAYR"])
        rngs = json.loads(sec[b"RNGS"])
        spec = ModelSpec(**spec_d)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"unreadable metadata ({exc})") from exc
    planes = _unpack_arrays(sec[b"PLAN"], "PLAN")
    params = _unpack_arrays(sec[b"PARM"], "PARM")
    optimizer = _unpack_arrays(sec[b"OPTM"], "OPTM")

    model = build_model(spec, np.random.default_rng(0))
    if [m["layer_id"] for m in layers_meta] != [l.layer_id for l in model.layers]:
        raise CheckpointInvariantError("layer list does not match the model spec")
    try:
        for layer, meta in zip(model.layers, layers_meta):
            lid = layer.layer_id
            layer.stride, layer.padding = meta["stride"], meta["padding"]
            layer.bits = meta["bits"]
            if meta["mode"] == "bsq":
                bt = BitTensor(tuple(meta["shape"]), meta["n"], meta["s"], planes[f"{lid}.pos"],
                               planes[f"{lid}.neg"], meta["step"])
                try:
                    bt.check()
                except ValueError as exc:
                    raise CheckpointInvariantError(f"{lid}: {exc}") from exc
                if bt.shape != layer.weight.shape:
                    raise CheckpointInvariantError(f"{lid}: plane shape {bt.shape} != {layer.weight.shape}")
                layer.bit_state, layer.weight = bt, None
            else:
                w = planes[f"{lid}.weight"]
                if w.shape != layer.weight.shape:
                    raise CheckpointInvariantError(f"{lid}: weight shape {w.shape} != {layer.weight.shape}")
                if not np.all(np.isfinite(w)):
                    raise CheckpointInvariantError(f"{lid}: non-finite weights")
                layer.weight = w
            layer.bias = params[f"{lid}.bias"] if meta["has_bias"] else None
            act = meta["act"]
            layer.act_quantizer = None if act is None else ActQuantizer(
                act["kind"], act["n_act"], float(params[f"{lid}.clip"]), act["clip_weight_decay"])
        for name, norm in model.norms.items():
            norm.gamma = params[f"{name}.gamma"]
            norm.beta = params[f"{name}.beta"]
            norm.state.running_mean = params[f"{name}.running_mean"]
            norm.state.running_var = params[f"{name}.running_var"]
    except KeyError as exc:
        raise CheckpointCorruptError(f"missing entry {exc}") from exc
    return Checkpoint(model, rngs["epoch"], rngs["rng_state"], optimizer)


def save_checkpoint(path, model: Model, epoch: int = 0, rng: np.random.Generator | None = None,
                    optimizer: dict[str, np.ndarray] | None = None) -> None:
    state = rng.bit_generator.state if rng is not None else None
    Path(path).write_bytes(to_bytes(Checkpoint(model, epoch, state, dict(optimizer or {}))))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def restore_rng(ckpt: Checkpoint) -> np.random.Generator | None:
    if ckpt.rng_state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return rng
