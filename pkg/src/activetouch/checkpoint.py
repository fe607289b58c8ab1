"""Versioned flat binary parameter checkpoints.

Layout (all integers little-endian uint32):
  magic b"ATCK" | version | component name length | name bytes
  then per parameter:
  name length | name bytes | rank | dims... | raw float64 little-endian
Round trips are bit-exact.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ATCK"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, component: str, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        nb = component.encode()
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            # asarray keeps 0-d shapes; ascontiguousarray would promote
            # them to rank 1 and break the round trip
            arr = np.asarray(params[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_checkpoint(path, expect_component: str | None = None) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        component = fh.read(n).decode()
        if expect_component is not None and component != expect_component:
            raise CheckpointError(
                f"{path}: checkpoint holds component {component!r}, expected {expect_component!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            buf = fh.read(8 * size)
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).copy()
    return component, params
