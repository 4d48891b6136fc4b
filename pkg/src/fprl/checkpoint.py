"""Checkpoint format: magic, version, config digest, then named float64 tensors.

Layout (little-endian):
    "FPRL1\\0" | u16 version | 32-byte sha256 config digest |
    repeat: u32 name_len | name utf8 | u32 rank | u32 dims[rank] | f64 data

Loading re-serializes byte-identically; a digest mismatch refuses the file
and prints both digests.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

CKPT_MAGIC = b"FPRL1\x00"
CKPT_VERSION = 1


def save_tensors(path: str | Path, digest: bytes,
                 tensors: dict[str, np.ndarray]) -> None:
    if len(digest) != 32:
        raise DataError("config digest must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(digest)
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"checkpoint truncated while reading {what}")
    return buf


def load_tensors(path: str | Path,
                 expect_digest: bytes | None = None) -> tuple[bytes, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        digest = _read_exact(fh, 32, "config digest")
        if expect_digest is not None and digest != expect_digest:
            raise DataError(
                "config digest mismatch: checkpoint "
                f"{digest.hex()} vs current {expect_digest.hex()}")
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError("checkpoint truncated while reading name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * count, f"data of {name}")
            if name in tensors:
                raise DataError(f"duplicate tensor {name!r} in checkpoint")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return digest, tensors
