"""Portable little-endian checkpoint format.

Layout (all integers little-endian)::

    b"SFIT"                         magic
    u32   format version            (currently 1)
    u16   n, n bytes utf-8          architecture id
    u32   n, n bytes utf-8          architecture hyperparameters, compact JSON, sorted keys
    u32   K                         number of classes
    u8    r, r x u32                input shape
    u64   iteration counter
    u32   number of tensor records
    per record:
      u16 n, n bytes utf-8          name ("param/…", "buffer/…", "optim/…")
      u8    dtype tag               1=float32 2=float64 3=int64
      u8    r, r x u32              shape
      raw little-endian element data, C order

Writing is deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, FormatError, ShapeMismatchError, TruncatedFileError, VersionError
from .models import Model, build_model

MAGIC = b"SFIT"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


def _records(model: Model) -> list[tuple[str, np.ndarray]]:
    records = list(model.state_dict().items())
    records += [(f"optim/{k}", v) for k, v in sorted(model.optimizer_state.items())]
    return records


def dumps(model: Model) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    arch = model.arch.encode()
    out += struct.pack("<H", len(arch)) + arch
    hp = json.dumps(model.hparams, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<I", len(hp)) + hp
    out += struct.pack("<I", model.num_classes)
    out += struct.pack("<B", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    out += struct.pack("<Q", model.iteration)
    records = _records(model)
    out += struct.pack("<I", len(records))
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise FormatError(f"cannot store dtype {arr.dtype} for {name}")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    return bytes(out)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (reader is {VERSION})")
    (n,) = r.unpack("<H")
    arch = r.take(n).decode()
    (n,) = r.unpack("<I")
    try:
        hparams = json.loads(r.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt architecture header: {exc}") from None
    (num_classes,) = r.unpack("<I")
    (rank,) = r.unpack("<B")
    input_shape = r.unpack(f"<{rank}I")
    (iteration,) = r.unpack("<Q")
    (count,) = r.unpack("<I")

    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        tag, rank = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{rank}I")
        dt = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        records[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last record")

    param_dtypes = {arr.dtype for key, arr in records.items() if key.startswith("param/")}
    if len(param_dtypes) != 1:
        raise FormatError("parameters must share a single element type")
    try:
        model = build_model(arch, hparams, dtype=param_dtypes.pop().newbyteorder("="))
    except (ConfigurationError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot rebuild architecture {arch!r} from the header: {exc}") from None
    if model.num_classes != num_classes or model.input_shape != tuple(input_shape):
        raise ShapeMismatchError("header classes/input shape disagree with the architecture")

    expected = {k: v.shape for k, v in model.state_dict().items()}
    stored = {k: v.shape for k, v in records.items() if not k.startswith("optim/")}
    if expected.keys() != stored.keys():
        missing = sorted(expected.keys() - stored.keys())
        extra = sorted(stored.keys() - expected.keys())
        raise ShapeMismatchError(f"tensor names disagree with architecture (missing {missing}, extra {extra})")
    for key, shape in expected.items():
        if stored[key] != shape:
            raise ShapeMismatchError(f"{key}: architecture expects {shape}, file has {stored[key]}")
    model.load_state_dict({k: v for k, v in records.items() if not k.startswith("optim/")})
    model.optimizer_state = {k[len("optim/"):]: v for k, v in records.items() if k.startswith("optim/")}
    model.iteration = int(iteration)
    return model


def load_checkpoint(path) -> Model:
    return loads(Path(path).read_bytes())
