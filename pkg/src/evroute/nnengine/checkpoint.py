"""Versioned binary checkpoint container.

Layout: 4-byte magic, little-endian uint32 format version, uint32 header
length, UTF-8 JSON header, then the raw tensor payloads. Tensors are stored
as little-endian float32 in header order. Readers reject unknown versions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EVCK"
FORMAT_VERSION = 1
_TENSOR_DTYPE = "<f4"


class CheckpointFormatError(ValueError):
    """File is not a checkpoint this package understands."""


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint written by an unknown format version."""


@dataclass
class Checkpoint:
    kind: str  # model kind, e.g. "ffn"
    config: dict  # architecture + anything needed to rebuild the model
    schema_fingerprint: str
    tensors: dict[str, np.ndarray]  # name -> float32 array


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype=_TENSOR_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        payloads.append(data)
        offset += len(data)
    header = json.dumps({
        "kind": ckpt.kind,
        "config": ckpt.config,
        "schema_fingerprint": ckpt.schema_fingerprint,
        "tensors": entries,
    }).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for data in payloads:
            fh.write(data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
            )
        header = json.loads(fh.read(header_len).decode())
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + nbytes], dtype=_TENSOR_DTYPE)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        schema_fingerprint=header["schema_fingerprint"],
        tensors=tensors,
    )
