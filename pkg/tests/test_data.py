import gzip
import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from superfit.data import DatasetSplit, load_cifar10, load_idx, make_blobs
from superfit.exceptions import FormatError, ParameterError, TruncatedFileError


def write_idx(tmp_path, images, labels, name="set", gz=False):
    img = struct.pack(">IIII", 0x803, *images.shape) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, len(labels)) + labels.astype(np.uint8).tobytes()
    opener, suffix = (gzip.open, ".gz") if gz else (open, "")
    paths = tmp_path / f"{name}-images{suffix}", tmp_path / f"{name}-labels{suffix}"
    for path, raw in zip(paths, (img, lab)):
        with opener(path, "wb") as fh:
            fh.write(raw)
    return paths


@pytest.fixture
def mnist_like():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (20, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[0, 0, 1] = 0
    return images, rng.integers(0, 10, 20).astype(np.uint8)


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, mnist_like, gz):
    images, labels = mnist_like
    split = load_idx(*write_idx(tmp_path, images, labels, gz=gz))
    assert split.images.shape == (20, 1, 28, 28) and split.images.dtype == np.float32
    assert split.images[0, 0, 0, 0] == 1.0 and split.images[0, 0, 0, 1] == 0.0
    np.testing.assert_array_equal(split.labels, labels)
    np.testing.assert_array_equal(split.images[:, 0] * 255, images)
    assert split.num_classes == 10 and len(split.checksum) == 64


def test_idx_bad_magic(tmp_path, mnist_like):
    img, lab = write_idx(tmp_path, *mnist_like)
    raw = bytearray(img.read_bytes())
    raw[3] = 0x01
    img.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_idx(img, lab)


def test_idx_truncated(tmp_path, mnist_like):
    img, lab = write_idx(tmp_path, *mnist_like)
    img.write_bytes(img.read_bytes()[:-5])
    with pytest.raises(TruncatedFileError):
        load_idx(img, lab)
    img.write_bytes(b"\0\0")
    with pytest.raises(TruncatedFileError):
        load_idx(img, lab)


def test_idx_count_mismatch(tmp_path, mnist_like):
    images, labels = mnist_like
    img, _ = write_idx(tmp_path, images, labels)
    _, lab = write_idx(tmp_path, images, labels[:-1], name="short")
    with pytest.raises(FormatError):
        load_idx(img, lab)


def test_idx_label_out_of_range(tmp_path, mnist_like):
    images, labels = mnist_like
    labels = labels.copy()
    labels[3] = 12
    with pytest.raises(FormatError):
        load_idx(*write_idx(tmp_path, images, labels))


def test_data_dir_env_var(tmp_path, mnist_like, monkeypatch):
    write_idx(tmp_path, *mnist_like)
    monkeypatch.setenv("SUPERFIT_DATA_DIR", str(tmp_path))
    monkeypatch.chdir(tmp_path.parent)
    assert len(load_idx("set-images", "set-labels")) == 20


def write_cifar(path, n, seed=0, label_hook=None):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    if label_hook:
        label_hook(labels)
    pixels = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
    path.write_bytes(np.concatenate([labels[:, None], pixels], axis=1).tobytes())
    return labels, pixels


def test_cifar_batch(tmp_path):
    labels, pixels = write_cifar(tmp_path / "data_batch_1.bin", 10000)
    split = load_cifar10(tmp_path / "data_batch_1.bin")
    assert len(split) == 10000 and split.input_shape == (3, 32, 32)
    np.testing.assert_array_equal(split.labels, labels)
    np.testing.assert_array_equal((split.images[7] * 255).round().astype(np.uint8).ravel(), pixels[7])
    sub = split.subsample(1280, seed=0)
    assert len(sub) == 1280
    assert sub.checksum == split.subsample(1280, seed=0).checksum
    assert sub.checksum != split.subsample(1280, seed=1).checksum


def test_cifar_multiple_files(tmp_path):
    write_cifar(tmp_path / "a.bin", 5, 0)
    write_cifar(tmp_path / "b.bin", 7, 1)
    assert len(load_cifar10([tmp_path / "a.bin", tmp_path / "b.bin"])) == 12


def test_cifar_bad_length(tmp_path):
    path = tmp_path / "x.bin"
    write_cifar(path, 3)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_cifar10(path)


def test_cifar_label_out_of_range(tmp_path):
    path = tmp_path / "x.bin"
    write_cifar(path, 4, label_hook=lambda lab: lab.__setitem__(2, 10))
    with pytest.raises(FormatError):
        load_cifar10(path)


def test_cifar100_fine_labels(tmp_path):
    rng = np.random.default_rng(0)
    coarse, fine = rng.integers(0, 20, 3), np.array([0, 57, 99])
    pixels = rng.integers(0, 256, (3, 3072))
    raw = np.concatenate([coarse[:, None], fine[:, None], pixels], axis=1).astype(np.uint8).tobytes()
    (tmp_path / "train.bin").write_bytes(raw)
    split = load_cifar10(tmp_path / "train.bin", num_classes=100, label_bytes=2)
    np.testing.assert_array_equal(split.labels, fine)


def test_blobs_balanced_two_class():
    data = make_blobs(100, 2, 2, seed=4)
    assert len(data) == 100 and data.input_shape == (2,)
    assert np.bincount(data.labels).tolist() == [50, 50]
    assert data.images.min() >= 0 and data.images.max() <= 1


def test_blobs_reproducible():
    a, b = make_blobs(200, 3, 5, seed=1), make_blobs(200, 3, 5, seed=1)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.checksum == b.checksum != make_blobs(200, 3, 5, seed=2).checksum


def test_blobs_linearly_separable_by_default():
    train_part, test_part = make_blobs(1000, 2, 2, seed=0).split(0.3)
    clf = LogisticRegression().fit(train_part.images, train_part.labels)
    assert clf.score(test_part.images, test_part.labels) >= 0.95


def test_blobs_needs_enough_points():
    with pytest.raises(ParameterError):
        make_blobs(1, 2)


def test_split_rejects_bad_pixels():
    with pytest.raises(ParameterError):
        DatasetSplit(np.array([[1.5]]), np.array([0]))
    with pytest.raises(ParameterError):
        DatasetSplit(np.array([[0.5]]), np.array([3]), num_classes=2)


def test_split_partitions_examples():
    data = make_blobs(90, 3, 4, seed=0)
    tr, te = data.split(1 / 3, seed=0)
    assert len(tr) == 60 and len(te) == 30
    both = np.concatenate([tr.images, te.images])
    assert len(np.unique(both, axis=0)) == 90
