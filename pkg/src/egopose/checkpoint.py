"""Binary parameter container.

Layout: the 8-byte magic ``b"EGOPOSE1"``, a little-endian uint64 header
length, a UTF-8 JSON header, then every parameter block as raw
little-endian float64 in header order.  The header records each block's
name, shape and byte offset (relative to the start of the payload) plus an
architecture hash over the block names and shapes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError

__all__ = ["architecture_hash", "save_checkpoint", "load_checkpoint", "checkpoint_bytes",
           "parse_checkpoint"]

MAGIC = b"EGOPOSE1"


def architecture_hash(blocks: Mapping[str, tuple[int, ...]], extra: Mapping | None = None) -> str:
    payload = {"blocks": [[name, list(shape)] for name, shape in blocks.items()],
               "extra": extra or {}}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _to_numpy(t) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().to(torch.float64).numpy()
    return np.ascontiguousarray(t, dtype="<f8")


def checkpoint_bytes(blocks: Mapping[str, object], header_extra: Mapping | None = None,
                     arch_extra: Mapping | None = None) -> bytes:
    arrays = {name: _to_numpy(v) for name, v in blocks.items()}
    shapes = {name: tuple(a.shape) for name, a in arrays.items()}
    entries, offset = [], 0
    for name, a in arrays.items():
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header = {
        "format": 1,
        "architecture_hash": architecture_hash(shapes, arch_extra),
        "blocks": entries,
        **(header_extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
    parts.extend(a.tobytes() for a in arrays.values())
    return b"".join(parts)


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    base = 16 + hlen
    blocks = {}
    for e in header["blocks"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 8 * count > len(data):
            raise CheckpointError(f"{source}: block {e['name']!r} truncated")
        blocks[e["name"]] = np.frombuffer(data, dtype="<f8", count=count,
                                          offset=start).reshape(e["shape"]).copy()
    return header, blocks


def save_checkpoint(path, blocks: Mapping[str, object], header_extra: Mapping | None = None,
                    arch_extra: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(blocks, header_extra, arch_extra))
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes(), str(path))
