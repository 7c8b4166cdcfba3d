import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitsift.checkpoint import (
    MAGIC, Checkpoint, CheckpointCorruptError, CheckpointError, CheckpointInvariantError, CheckpointVersionError,
    from_bytes, load_checkpoint, restore_rng, save_checkpoint, to_bytes,
)
from bitsift.models import ModelSpec, attach_bsq, build_model, fix_precisions
from bitsift.pipeline import adjust_model


def bsq_mlp(seed=0, n0=6):
    model = build_model(ModelSpec("mlp", (12,), 3, (10,), act_bits=3), np.random.default_rng(seed))
    return attach_bsq(model, n0)


def bsq_resnet(seed=0):
    spec = ModelSpec("resnet", (1, 6, 6), 3, (4, 6), blocks_per_stage=1, act_bits=3)
    return attach_bsq(build_model(spec, np.random.default_rng(seed)), 5)


def relax(model, rng):
    for layer in model.layers:
        bt = layer.bit_state
        bt.pos[:] = np.clip(bt.pos + rng.uniform(-0.3, 0.3, bt.pos.shape), 0, 2)


# -- round trip --------------------------------------------------------------

@pytest.mark.parametrize("make", [bsq_mlp, bsq_resnet])
def test_round_trip_forward_bitwise(make, rng, tmp_path):
    model = make()
    relax(model, rng)
    x = rng.normal(size=(5, *model.spec.input_shape))
    model.forward(x, training=True)  # moves batchnorm running stats off their defaults
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, epoch=3)
    loaded = load_checkpoint(path)
    assert loaded.epoch == 3
    assert np.array_equal(loaded.model.predict(x), model.predict(x))


def test_save_load_save_byte_identical(rng, tmp_path):
    model = bsq_resnet()
    relax(model, rng)
    opt = {"fc.pos": rng.normal(size=(5, 3, 6)), "stem.clip": np.array(0.25)}
    gen = np.random.default_rng(99)
    gen.normal(size=3)
    save_checkpoint(tmp_path / "a", model, 7, gen, opt)
    ck = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "b", ck.model, ck.epoch, restore_rng(ck), ck.optimizer)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert all(np.array_equal(ck.optimizer[k], v) for k, v in opt.items())


def test_every_plane_and_scale_preserved(rng):
    model = bsq_mlp()
    relax(model, rng)
    ck = from_bytes(to_bytes(Checkpoint(model)))
    for a, b in zip(model.layers, ck.model.layers):
        assert (a.bit_state.n, a.bit_state.s, a.bit_state.step) == (b.bit_state.n, b.bit_state.s, b.bit_state.step)
        assert np.array_equal(a.bit_state.pos, b.bit_state.pos) and np.array_equal(a.bit_state.neg, b.bit_state.neg)
        qa, qb = a.act_quantizer, b.act_quantizer
        if qa is None:
            assert qb is None
        else:
            assert (qa.kind, qa.n_act) == (qb.kind, qb.n_act) and np.array_equal(qa.clip_level, qb.clip_level)


def test_rng_state_preserved(tmp_path):
    gen = np.random.default_rng(2024)
    gen.integers(10, size=5)
    save_checkpoint(tmp_path / "c", bsq_mlp(), rng=gen)
    resumed = restore_rng(load_checkpoint(tmp_path / "c"))
    assert np.array_equal(resumed.normal(size=4), gen.normal(size=4))


def test_float_and_fixed_layers_round_trip(rng):
    model = build_model(ModelSpec("cnn", (1, 6, 6), 3, (4,)), rng)
    fixed = fix_precisions(model, {"conv0": 3, "fc": 5})
    for m in (model, fixed):
        back = from_bytes(to_bytes(Checkpoint(m))).model
        assert [l.mode for l in back.layers] == [l.mode for l in m.layers]
        x = rng.normal(size=(2, 1, 6, 6))
        assert np.array_equal(back.predict(x), m.predict(x))


def test_zero_bit_layer(rng):
    model = bsq_mlp()
    bt = model.layers[0].bit_state
    bt.pos[:] = 0.0
    bt.neg[:] = 0.0
    adjust_model(model, 0)
    back = from_bytes(to_bytes(Checkpoint(model))).model
    assert back.layers[0].bit_state.n == 0 and back.layers[0].bit_state.pos.shape == (0, 10, 12)


# -- integrity ---------------------------------------------------------------

def test_bad_magic():
    blob = bytearray(to_bytes(Checkpoint(bsq_mlp())))
    blob[0] ^= 0xFF
    with pytest.raises(CheckpointCorruptError):
        from_bytes(bytes(blob))


def test_version_mismatch():
    blob = bytearray(to_bytes(Checkpoint(bsq_mlp())))
    blob[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError):
        from_bytes(bytes(blob))


def test_truncated_and_trailing():
    blob = to_bytes(Checkpoint(bsq_mlp()))
    with pytest.raises(CheckpointCorruptError):
        from_bytes(blob[:-3])
    with pytest.raises(CheckpointCorruptError):
        from_bytes(blob + b"\x00")


_BLOB = to_bytes(Checkpoint(bsq_mlp()))


@settings(max_examples=200)
@given(st.integers(0, len(_BLOB) - 1), st.integers(1, 255))
def test_any_flipped_byte_is_detected(pos, mask):
    blob = bytearray(_BLOB)
    blob[pos] ^= mask
    with pytest.raises(CheckpointError):
        from_bytes(bytes(blob))


def test_invariant_violation_on_load():
    # a plane value outside [0, 2] written with a valid checksum must still be rejected
    model = bsq_mlp()
    model.layers[0].bit_state.pos[0, 0, 0] = 3.0
    with pytest.raises(CheckpointInvariantError):
        from_bytes(to_bytes(Checkpoint(model)))


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "nope.ckpt")
