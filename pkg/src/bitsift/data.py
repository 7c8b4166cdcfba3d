"""Datasets: MNIST IDX files, CIFAR-10 binary batches and synthetic blobs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_ROW = 1 + 3 * 32 * 32

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    """The file does not start with the expected magic number."""


class IdxHeaderError(IdxError):
    """The header is truncated or declares impossible dimensions."""


class IdxTruncatedError(IdxError):
    """The payload is shorter than the header promises."""


class IdxPairingError(IdxError):
    """Image and label files disagree on the number of records."""


class EmptyDatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``(x, y)`` minibatches, shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


def split_dataset(data: Dataset, n_train: int, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Random disjoint train/test split with ``n_train`` training records."""
    if not 0 < n_train < len(data):
        raise ValueError(f"n_train must be in (0, {len(data)}), got {n_train}")
    order = rng.permutation(len(data))
    return data.subset(np.sort(order[:n_train]), "train"), data.subset(np.sort(order[n_train:]), "test")


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an array shaped by its header."""
    if len(raw) < 4:
        raise IdxHeaderError(f"file is {len(raw)} bytes, too short for a magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxHeaderError(f"header needs {header_len} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header_len + count:
        raise IdxTruncatedError(f"payload has {len(raw) - header_len} bytes, header declares {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def load_mnist_idx(images_path, labels_path, mean: float = MNIST_MEAN, std: float = MNIST_STD,
                   split: str = "train") -> Dataset:
    """Images come back as ``N x 1 x 28 x 28`` float64, scaled to [0, 1] then normalized."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxPairingError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = normalize(images.astype(np.float64) / 255.0, mean, std)
    return Dataset(x[:, None, :, :], labels.astype(np.int64), 10, split)


def normalize(x: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ValueError("std must be positive")
    return (x - mean) / std


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (gzip-compressed if ``path`` ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # no name and mtime=0 keep the compressed bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def load_cifar10_bin(paths, mean=(0.4914, 0.4822, 0.4465), std=(0.2470, 0.2435, 0.2616),
                     split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches (rows of 1 label byte + 3072 pixel bytes)."""
    rows = []
    for p in [paths] if isinstance(paths, (str, Path)) else paths:
        raw = _read_bytes(p)
        if len(raw) % CIFAR_ROW:
            raise IdxTruncatedError(f"{p}: {len(raw)} bytes is not a whole number of rows")
        rows.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_ROW))
    table = np.concatenate(rows)
    labels = table[:, 0].astype(np.int64)
    x = table[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    x = (x - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]
    return Dataset(x, labels, 10, split)


def blob_centers(num_classes: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """Class centers with every pair at least ``separation`` apart."""
    rng = np.random.default_rng([seed, 0xB10B])
    # Random orthonormal directions when they fit, otherwise random unit vectors
    # rescaled until the minimum pairwise distance reaches ``separation``.
    if num_classes <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, num_classes)))
        return q.T * (separation / np.sqrt(2.0))
    c = rng.normal(size=(num_classes, dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    min_d = d[~np.eye(num_classes, dtype=bool)].min()
    return c * (separation / min_d)


def synth_blobs(num_classes: int, n_per_class: int, dim: int, seed: int, separation: float = 6.0,
                image_shape: tuple[int, ...] | None = None, split: str = "train",
                center_seed: int | None = None) -> Dataset:
    """Unit-variance Gaussian blobs around fixed, well separated class centers.

    ``center_seed`` (default: ``seed``) picks the centers; a held-out split
    shares the centers of its training split but draws fresh samples.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if n_per_class <= 0 or num_classes <= 0:
        raise EmptyDatasetError("synthetic dataset would be empty")
    centers = blob_centers(num_classes, dim, separation, seed if center_seed is None else center_seed)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = centers[labels] + rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    x, labels = x[order], labels[order]
    if image_shape is not None:
        if int(np.prod(image_shape)) != dim:
            raise ValueError(f"image_shape {image_shape} does not hold {dim} values")
        x = x.reshape((len(labels), *image_shape))
    return Dataset(x, labels, num_classes, split)
