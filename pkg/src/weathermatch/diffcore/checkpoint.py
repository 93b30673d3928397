"""Binary checkpoint format.

Layout (all integers little-endian):

    magic  b"MWCK"
    version  u32
    count    u32          -- number of parameter records
    records  count times:
        name_len u32, name UTF-8,
        flags u8 (bit0 = is_bias, bit1 = trainable),
        rank u32, dims u32 * rank,
        data float32 little-endian (prod(dims) values)
    opt_count u32         -- optimizer-state records, same record format
    records   opt_count times (flags byte written as 0)
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError
from .optim import AdamW
from .store import ParameterStore

MAGIC = b"MWCK"
VERSION = 1


def _write_record(f, name: str, flags: int, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", flags))
    dims = arr.shape
    f.write(struct.pack("<I", len(dims)))
    for d in dims:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(f):
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated checkpoint record")
    (name_len,) = struct.unpack("<I", raw)
    name = f.read(name_len).decode("utf-8")
    (flags,) = struct.unpack("<B", f.read(1))
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = f.read(count * 4)
    if len(payload) != count * 4:
        raise FormatError(f"truncated data for record {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return name, flags, arr


def save_checkpoint(path: str, store: ParameterStore, optimizer: AdamW = None) -> None:
    tensors = store.tensors()
    opt_records = optimizer.state_arrays() if optimizer is not None else []
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for t in tensors:
            flags = (1 if t.is_bias else 0) | (2 if t.trainable else 0)
            _write_record(f, t.name, flags, t.values)
        f.write(struct.pack("<I", len(opt_records)))
        for name, arr in opt_records:
            _write_record(f, name, 0, arr)


def load_checkpoint(path: str):
    """Returns (ParameterStore, optimizer-state records or None)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FormatError(f"bad checkpoint magic in {path}")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        store = ParameterStore(np.float32)
        for _ in range(count):
            name, flags, arr = _read_record(f)
            store.add(name, arr, is_bias=bool(flags & 1), trainable=bool(flags & 2))
        raw = f.read(4)
        opt_records = []
        if raw:
            (opt_count,) = struct.unpack("<I", raw)
            for _ in range(opt_count):
                name, _, arr = _read_record(f)
                opt_records.append((name, arr))
    return store, (opt_records or None)
