"""Dataset containers and loaders (IDX, CIFAR binary, synthetic blobs).

Pixels are kept in raw ``[0, 1]`` space with no standardisation, because the
attack box constraint is defined there.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs as _sk_make_blobs

from .exceptions import FormatError, ParameterError, TruncatedFileError
from .validation import check_labels

DATA_DIR_ENV = "SUPERFIT_DATA_DIR"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_BYTES = 3 * 32 * 32


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int | None = None
    checksum: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if len(self.images) == 0:
            raise ParameterError("a dataset split needs at least one example")
        if not np.isfinite(self.images).all() or self.images.min() < 0 or self.images.max() > 1:
            raise ParameterError("pixel values must be finite and lie in [0, 1]")
        if self.num_classes is None:
            self.num_classes = int(np.max(self.labels)) + 1
        self.labels = check_labels(self.labels, self.num_classes, len(self.images))
        if not self.checksum:
            self.checksum = _digest(self.images.tobytes(), self.labels.tobytes())

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, indices, name: str | None = None) -> "DatasetSplit":
        indices = np.asarray(indices)
        return DatasetSplit(self.images[indices], self.labels[indices], name or self.name,
                            self.num_classes)

    def subsample(self, n: int, seed: int = 0) -> "DatasetSplit":
        """Deterministic random subset of ``n`` examples (original order kept)."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return self.take(idx, f"{self.name}[{n}@{seed}]")

    def split(self, test_fraction: float, seed: int = 0) -> tuple["DatasetSplit", "DatasetSplit"]:
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(len(self) * test_fraction))
        test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
        return self.take(train, f"{self.name}/train"), self.take(test, f"{self.name}/test")


def _digest(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def resolve_path(path) -> Path:
    """Resolve relative paths against ``$SUPERFIT_DATA_DIR`` when it is set."""
    path = Path(path)
    root = os.environ.get(DATA_DIR_ENV)
    if not path.is_absolute() and root and not path.exists():
        return Path(root) / path
    return path


def _read_bytes(path) -> bytes:
    path = resolve_path(path)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what} file is too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{what} file has magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what} file header is truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    body = raw[header:]
    if len(body) != count:
        cls = TruncatedFileError if len(body) < count else FormatError
        raise cls(f"{what} file declares {count} bytes of data but has {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str | None = None) -> DatasetSplit:
    """Load an IDX image/label file pair (MNIST layout, optionally gzipped)."""
    raw_images = _read_bytes(images_path)
    raw_labels = _read_bytes(labels_path)
    images = _parse_idx(raw_images, IDX_IMAGES_MAGIC, "image")
    labels = _parse_idx(raw_labels, IDX_LABELS_MAGIC, "label")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} out of range for {num_classes} classes")
    x = (images.astype(np.float32) / np.float32(255))[:, None, :, :]
    return DatasetSplit(x, labels.astype(np.int64), name or Path(images_path).name, num_classes,
                        _digest(raw_images, raw_labels))


def load_cifar10(paths, num_classes: int = 10, label_bytes: int = 1, name: str | None = None) -> DatasetSplit:
    """Load one or more CIFAR binary batch files (1 label byte + 3072 pixels).

    CIFAR-100 files use ``label_bytes=2`` and ``num_classes=100``; the fine label
    (second byte) is kept.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    record = label_bytes + CIFAR_IMAGE_BYTES
    xs, ys, digests = [], [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % record:
            raise FormatError(f"{path}: length {len(raw)} is not a positive multiple of {record}")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels = arr[:, label_bytes - 1].astype(np.int64)
        if labels.max() >= num_classes:
            raise FormatError(f"{path}: label {labels.max()} out of range for {num_classes} classes")
        xs.append(arr[:, label_bytes:].reshape(-1, 3, 32, 32))
        ys.append(labels)
        digests.append(raw)
    x = np.concatenate(xs).astype(np.float32) / np.float32(255)
    return DatasetSplit(x, np.concatenate(ys), name or Path(paths[0]).name, num_classes, _digest(*digests))


def make_blobs(n: int = 100, num_classes: int = 2, dim: int = 2, seed: int = 0,
               cluster_std: float = 1.0, center_box: tuple[float, float] = (-10.0, 10.0)) -> DatasetSplit:
    """Seeded Gaussian clusters, min-max scaled per feature into ``[0, 1]``."""
    if n < num_classes:
        raise ParameterError("need at least one example per class")
    x, y = _sk_make_blobs(n_samples=n, n_features=dim, centers=num_classes, cluster_std=cluster_std,
                          center_box=center_box, random_state=seed)
    lo, hi = x.min(axis=0), x.max(axis=0)
    x = ((x - lo) / np.where(hi > lo, hi - lo, 1.0)).clip(0, 1).astype(np.float32)
    name = f"blobs(n={n},k={num_classes},dim={dim},seed={seed},std={cluster_std})"
    return DatasetSplit(x, y.astype(np.int64), name, num_classes)
