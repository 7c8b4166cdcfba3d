import gzip
import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitsift.data import (
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_MEAN, MNIST_STD, Dataset, EmptyDatasetError, IdxHeaderError,
    IdxMagicError, IdxPairingError, IdxTruncatedError, load_cifar10_bin, load_mnist_idx, normalize, parse_idx,
    split_dataset, synth_blobs, write_idx,
)
from oracles import parse_idx_struct

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist10k"
IMAGES = MNIST_DIR / "images-idx3-ubyte.gz"
LABELS = MNIST_DIR / "labels-idx1-ubyte.gz"

# pinned once with the struct-only oracle parser (tests/oracles.py)
GOLDEN_IMAGES_SHA256_16 = "5b921c254614148674d4b657cf4f1aac099c6a8479c3e4be4650b882d319e89a"
GOLDEN_LABELS_SHA256_16 = "3e95eeb91e98d08e9c715493fc179f00922387f40819e5759bb2285c47463860"
GOLDEN_LABELS_16 = [2, 3, 6, 4, 3, 1, 3, 5, 7, 4, 3, 7, 5, 7, 1, 2]


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


# -- IDX parsing -------------------------------------------------------------

def test_golden_first_16_records():
    raw_images = gzip.decompress(IMAGES.read_bytes())
    raw_labels = gzip.decompress(LABELS.read_bytes())
    images = parse_idx(raw_images, IDX_IMAGES_MAGIC)
    labels = parse_idx(raw_labels, IDX_LABELS_MAGIC)
    assert images.shape == (10000, 28, 28) and labels.shape == (10000,)
    assert hashlib.sha256(images[:16].tobytes()).hexdigest() == GOLDEN_IMAGES_SHA256_16
    assert hashlib.sha256(labels[:16].tobytes()).hexdigest() == GOLDEN_LABELS_SHA256_16
    assert labels[:16].tolist() == GOLDEN_LABELS_16


def test_parser_agrees_with_struct_oracle():
    dims, payload = parse_idx_struct(IMAGES.read_bytes())
    images = parse_idx(gzip.decompress(IMAGES.read_bytes()), IDX_IMAGES_MAGIC)
    assert images.shape == dims and images.tobytes() == payload


def test_load_mnist_normalizes():
    data = load_mnist_idx(IMAGES, LABELS)
    assert data.images.shape == (10000, 1, 28, 28) and len(data) == 10000
    assert data.labels[:16].tolist() == GOLDEN_LABELS_16
    _, payload = parse_idx_struct(IMAGES.read_bytes())
    first = np.frombuffer(payload[:784], dtype=np.uint8).reshape(28, 28)
    assert np.array_equal(data.images[0, 0], (first / 255.0 - MNIST_MEAN) / MNIST_STD)


def test_bad_magic():
    with pytest.raises(IdxMagicError):
        parse_idx(idx_bytes(IDX_LABELS_MAGIC, [3], [1, 2, 3]), IDX_IMAGES_MAGIC)


@pytest.mark.parametrize("raw", [b"", b"\x00\x00", idx_bytes(IDX_IMAGES_MAGIC, [2, 28], [])[:10]])
def test_truncated_header(raw):
    with pytest.raises(IdxHeaderError):
        parse_idx(raw, IDX_IMAGES_MAGIC)


def test_truncated_payload():
    with pytest.raises(IdxTruncatedError):
        parse_idx(idx_bytes(IDX_LABELS_MAGIC, [5], [1, 2, 3]), IDX_LABELS_MAGIC)


def test_pairing_mismatch(tmp_path):
    write_idx(tmp_path / "im.gz", np.zeros((3, 28, 28), dtype=np.uint8))
    write_idx(tmp_path / "lb", np.zeros(4, dtype=np.uint8))
    with pytest.raises(IdxPairingError):
        load_mnist_idx(tmp_path / "im.gz", tmp_path / "lb")


def test_error_types_are_distinct():
    kinds = {IdxMagicError, IdxHeaderError, IdxTruncatedError, IdxPairingError}
    assert len(kinds) == 4 and all(issubclass(k, ValueError) for k in kinds)


@given(st.lists(st.integers(0, 255), min_size=1, max_size=50), st.booleans())
def test_write_parse_round_trip(values, compress):
    arr = np.array(values, dtype=np.uint8)
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / ("x.gz" if compress else "x")
        write_idx(path, arr)
        raw = path.read_bytes()
    dims, payload = parse_idx_struct(raw)
    assert dims == (len(values),) and payload == arr.tobytes()


def test_write_idx_reproducible(tmp_path):
    arr = np.arange(20, dtype=np.uint8).reshape(4, 5)
    write_idx(tmp_path / "a.gz", arr)
    write_idx(tmp_path / "b.gz", arr)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()


# -- CIFAR -------------------------------------------------------------------

def test_cifar_rows(tmp_path):
    rows = np.zeros((2, 3073), dtype=np.uint8)
    rows[:, 0] = [3, 9]
    rows[1, 1:] = 255
    (tmp_path / "b.bin").write_bytes(rows.tobytes())
    data = load_cifar10_bin(tmp_path / "b.bin")
    assert data.labels.tolist() == [3, 9] and data.images.shape == (2, 3, 32, 32)
    assert data.images[1, 0, 0, 0] == pytest.approx((1 - 0.4914) / 0.2470)
    (tmp_path / "bad.bin").write_bytes(rows.tobytes()[:-1])
    with pytest.raises(IdxTruncatedError):
        load_cifar10_bin(tmp_path / "bad.bin")


# -- Dataset -----------------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)


def test_batches_cover_every_record_once(rng):
    data = Dataset(np.arange(23.0)[:, None], np.zeros(23), 2)
    seen = np.concatenate([x[:, 0] for x, _ in data.batches(5, rng)])
    assert sorted(seen.tolist()) == list(range(23))
    assert [len(y) for _, y in data.batches(5)] == [5, 5, 5, 5, 3]


def test_split_dataset_disjoint(rng):
    data = Dataset(np.arange(50.0)[:, None], np.arange(50) % 5, 5)
    train, test = split_dataset(data, 40, rng)
    assert len(train) == 40 and len(test) == 10
    assert not set(train.images[:, 0]) & set(test.images[:, 0])
    with pytest.raises(ValueError):
        split_dataset(data, 50, rng)


def test_normalize_is_pure():
    x = np.linspace(0, 1, 7)
    assert np.array_equal(normalize(x, 0.5, 0.25), normalize(x.copy(), 0.5, 0.25))
    with pytest.raises(ValueError):
        normalize(x, 0.0, 0.0)


# -- synthetic blobs ---------------------------------------------------------

def test_synth_deterministic():
    a, b = synth_blobs(3, 20, 5, seed=4), synth_blobs(3, 20, 5, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_blobs(3, 20, 5, seed=5).images)


def test_synth_test_split_shares_centers():
    train = synth_blobs(4, 500, 8, seed=0)
    test = synth_blobs(4, 500, 8, seed=1, center_seed=0, split="test")
    for c in range(4):
        assert np.allclose(train.images[train.labels == c].mean(0), test.images[test.labels == c].mean(0), atol=0.25)
    assert test.split == "test"


def test_synth_linearly_separable():
    data = synth_blobs(4, 250, 16, seed=0, separation=6.0)
    # least-squares linear classifier on one-hot targets
    x = np.hstack([data.images, np.ones((len(data), 1))])
    w, *_ = np.linalg.lstsq(x, np.eye(4)[data.labels], rcond=None)
    assert np.mean(np.argmax(x @ w, axis=1) == data.labels) >= 0.99


def test_synth_empty_rejected():
    with pytest.raises(EmptyDatasetError):
        synth_blobs(3, 0, 4, seed=0)
    with pytest.raises(ValueError):
        synth_blobs(3, 5, 1, seed=0)


def test_synth_image_shape():
    data = synth_blobs(2, 3, 64, seed=0, image_shape=(1, 8, 8))
    assert data.images.shape == (6, 1, 8, 8)
    with pytest.raises(ValueError):
        synth_blobs(2, 3, 63, seed=0, image_shape=(1, 8, 8))
