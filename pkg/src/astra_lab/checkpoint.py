"""Binary parameter checkpoints.

Layout: magic ``ASTRACKPT``, u32 version (=1), u32 record count, then per
record a u16 name length, the UTF-8 name, a u8 rank, ``rank`` u32 extents,
and the row-major little-endian f32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ASTRACKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, named_params: dict[str, np.ndarray]):
    """Write parameters in insertion order; values are cast to f32."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named_params)))
        for name, value in named_params.items():
            arr = np.asarray(value, dtype="<f4")
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise CheckpointError(f"parameter name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"parameter rank too large: {name!r}")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated file while reading {what}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint; returns name -> float64 array (f32 precision)."""
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"bad header in {path}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
            n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 4 * n_items, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            out[name] = arr.astype(np.float64)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"trailing bytes after last record in {path}")
    return out


def load_into(path, named_params):
    """Load a checkpoint into live Parameters; names must match exactly."""
    loaded = load_checkpoint(path)
    expected = set(named_params)
    got = set(loaded)
    if expected != got:
        missing = sorted(expected - got)
        unknown = sorted(got - expected)
        raise CheckpointError(
            f"parameter name mismatch: missing={missing}, unknown={unknown}"
        )
    for name, param in named_params.items():
        arr = loaded[name]
        if arr.shape != param.value.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: file {arr.shape}, "
                f"model {param.value.shape}"
            )
        param.value[...] = arr
