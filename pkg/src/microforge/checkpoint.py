"""Self-describing binary checkpoint container.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON
header, then the raw little-endian float64 blobs. The header carries the
format version, a config echo, training metadata, and the named
parameter list with shapes and byte offsets. Round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MFCHKPT1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def save_checkpoint(path, config: dict, params: dict[str, np.ndarray],
                    metadata: dict | None = None) -> None:
    path = Path(path)
    names = list(params)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "metadata": metadata or {},
        "params": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    body = raw[16 + hlen:]
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * n
        if end > len(body):
            raise CheckpointError(f"{path}: truncated blob for {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(body[start:end], dtype="<f8").reshape(shape).copy()
    return Checkpoint(config=header["config"], params=params,
                      metadata=header["metadata"], format_version=header["format_version"])


def params_digest(params: dict[str, np.ndarray]) -> str:
    """Order-independent hash of named parameter values."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()
