import struct

import numpy as np
import pytest

from superfit.checkpoint import MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from superfit.exceptions import FormatError, ShapeMismatchError, TruncatedFileError, VersionError
from superfit.models import build_middlecnn, build_tinymlp
from superfit.training import Adam


@pytest.fixture
def cnn():
    model = build_middlecnn(1, 8, 3, channels=(2, 3, 4), hidden=6, seed=2)
    model.train()
    model(np.random.default_rng(0).uniform(0, 1, (4, 1, 8, 8)).astype(np.float32))
    model.eval()
    model.iteration = 1234
    return model


def test_round_trip_is_bit_exact(cnn, tmp_path):
    path = tmp_path / "m.sfit"
    save_checkpoint(cnn, path)
    loaded = load_checkpoint(path)
    for (k, a), (k2, b) in zip(cnn.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and a.dtype == b.dtype and a.tobytes() == b.tobytes()
    assert loaded.iteration == 1234
    assert loaded.arch == "middlecnn" and loaded.hparams == cnn.hparams
    assert dumps(loaded) == path.read_bytes()


def test_running_stats_survive(cnn):
    loaded = loads(dumps(cnn))
    assert loaded.named_buffers()["bn1.running_mean"].any()
    x = np.random.default_rng(1).uniform(0, 1, (2, 1, 8, 8)).astype(np.float32)
    assert loaded.predict_logits(x).tobytes() == cnn.predict_logits(x).tobytes()


def test_float64_and_optimizer_state_round_trip():
    model = build_tinymlp(3, 4, 2, dtype=np.float64)
    opt = Adam(model)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    opt.step()
    model.optimizer_state = opt.state_dict()
    loaded = loads(dumps(model))
    assert loaded.dtype == np.float64
    assert loaded.optimizer_state.keys() == model.optimizer_state.keys()
    assert int(loaded.optimizer_state["adam.t"]) == 1


def test_header_layout_is_little_endian(cnn):
    raw = dumps(cnn)
    assert raw[:4] == MAGIC == b"SFIT"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    (n,) = struct.unpack("<H", raw[8:10])
    assert raw[10:10 + n] == b"middlecnn"


def test_bad_magic(cnn):
    raw = bytearray(dumps(cnn))
    raw[:4] = b"XXXX"
    with pytest.raises(FormatError) as info:
        loads(bytes(raw))
    assert type(info.value) is FormatError


def test_future_version(cnn):
    raw = bytearray(dumps(cnn))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        loads(bytes(raw))


@pytest.mark.parametrize("cut", [3, 9, 40, -1])
def test_truncated(cnn, cut):
    raw = dumps(cnn)
    with pytest.raises(TruncatedFileError):
        loads(raw[:cut])


def test_trailing_garbage(cnn):
    with pytest.raises(FormatError):
        loads(dumps(cnn) + b"\0")


def test_shape_mismatch_error_is_distinct(cnn):
    other = build_middlecnn(1, 8, 3, channels=(2, 3, 4), hidden=7, seed=2)
    good, bad = dumps(cnn), dumps(other)
    hp_pos = 10 + len(b"middlecnn")
    (good_len,) = struct.unpack("<I", good[hp_pos:hp_pos + 4])
    (bad_len,) = struct.unpack("<I", bad[hp_pos:hp_pos + 4])
    # header (architecture) from `cnn`, tensor records from `other`
    spliced = good[:hp_pos + 4 + good_len] + bad[hp_pos + 4 + bad_len:]
    with pytest.raises(ShapeMismatchError):
        loads(spliced)


def test_unknown_architecture(cnn):
    raw = dumps(cnn).replace(b"middlecnn", b"middlecnx", 1)
    with pytest.raises(FormatError) as info:
        loads(raw)
    assert "middlecnx" in str(info.value)
