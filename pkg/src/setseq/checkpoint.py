"""Binary parameter checkpoints.

Format: magic "RPW1", one version byte, then repeated records of
(name length u64 LE, name bytes utf-8, rank u64 LE, extents u64 LE each,
values float64 LE in row-major order). Loading restores bit-identical
values; loading into a model is strict about the name set.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"RPW1"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        for name in sorted(tensors):
            arr = tensors[name]
            data = np.asarray(arr.data if isinstance(arr, Tensor) else arr,
                              dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(data.astype("<f8").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; expected {MAGIC!r}")
        version = _read_exact(fh, 1, "version")[0]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise CheckpointError("truncated checkpoint while reading name length")
            (name_len,) = struct.unpack("<Q", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, "rank"))
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "extent"))[0]
                          for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, count * 8, f"values of {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def load_into(path, params: dict[str, Tensor]) -> None:
    """Strict restore: the stored and live name sets must match exactly."""
    stored = load_checkpoint(path)
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint/model mismatch: missing from file {missing}, "
            f"unknown in file {extra}")
    for name, arr in stored.items():
        live = params[name]
        if live.data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"{arr.shape} vs {live.data.shape}")
        live.data = arr.copy()
        live.grad = None
