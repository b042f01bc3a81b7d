"""Binary model checkpoints.

Layout (all integers little-endian):

    magic          8 bytes, b"SPANREL1"
    version        u32
    config length  u64, then that many bytes of canonical JSON (sorted keys)
    tensor count   u64
    per tensor:    name length u32 + UTF-8 name, rank u32, dims u64 each,
                   then rank-product float64 values, little-endian

Tensors are written sorted by name, values verbatim from the parameter
store, so save -> load is bit-identical. Loading into a live store checks
that the name sets and shapes agree and names the first offending tensor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import canonical_json
from .errors import ConfigError, DataError
from .tensor import ParameterStore

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "save_checkpoint",
    "read_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"SPANREL1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    version: int
    config: dict
    tensors: dict  # name -> float64 ndarray


def save_checkpoint(path, store: ParameterStore, config: dict) -> None:
    """Write the store's tensors plus a JSON config snapshot."""
    blob = canonical_json(config).encode("utf-8")
    names = sorted(store.names())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(names)))
        for name in names:
            # np.ascontiguousarray would promote rank-0 to rank-1; tobytes()
            # below emits C order for any layout, so only the dtype matters.
            data = np.asarray(store[name].data, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def _take(buf: memoryview, offset: int, count: int, what: str):
    if offset + count > len(buf):
        raise DataError(f"truncated checkpoint: ran out of bytes reading {what}")
    return buf[offset:offset + count], offset + count


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file without needing a model around."""
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    raw, off = _take(buf, 0, 8, "magic")
    if bytes(raw) != CHECKPOINT_MAGIC:
        raise DataError(f"not a checkpoint file: bad magic {bytes(raw)!r}")
    raw, off = _take(buf, off, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} "
                        f"(this build reads {CHECKPOINT_VERSION})")
    raw, off = _take(buf, off, 8, "config length")
    (config_len,) = struct.unpack("<Q", raw)
    raw, off = _take(buf, off, config_len, "config JSON")
    try:
        config = json.loads(bytes(raw).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt config snapshot: {exc}") from None
    raw, off = _take(buf, off, 8, "tensor count")
    (count,) = struct.unpack("<Q", raw)
    tensors = {}
    for k in range(count):
        raw, off = _take(buf, off, 4, f"tensor {k} name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, name_len, f"tensor {k} name")
        name = bytes(raw).decode("utf-8")
        raw, off = _take(buf, off, 4, f"{name}: rank")
        (rank,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, 8 * rank, f"{name}: dims")
        dims = struct.unpack(f"<{rank}Q", raw)
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw, off = _take(buf, off, 8 * size, f"{name}: values")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    if off != len(buf):
        raise DataError(f"trailing garbage: {len(buf) - off} bytes after the "
                        f"last tensor")
    return Checkpoint(version=version, config=config, tensors=tensors)


def load_checkpoint(path, store: ParameterStore) -> dict:
    """Read a checkpoint into an existing store; returns the config snapshot.

    The store must have exactly the checkpoint's tensor names with matching
    shapes — the first mismatch is reported by tensor name.
    """
    ckpt = read_checkpoint(path)
    have = set(store.names())
    saved = set(ckpt.tensors)
    for name in sorted(saved - have):
        raise ConfigError(f"checkpoint tensor {name!r} has no slot in the "
                          f"configured model")
    for name in sorted(have - saved):
        raise ConfigError(f"model parameter {name!r} missing from checkpoint")
    for name in sorted(saved):
        want = store[name].data.shape
        got = ckpt.tensors[name].shape
        if want != got:
            raise ConfigError(f"checkpoint tensor {name!r} has shape {got}, "
                              f"model expects {want}")
    for name, data in ckpt.tensors.items():
        store[name].data[...] = data
    return ckpt.config
