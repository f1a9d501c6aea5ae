"""Flat binary checkpoints.

Layout::

    magic    b"RANK1BNN\\x00CKPT"  (13 bytes)
    version  uint16 little-endian
    hlen     uint64 little-endian
    header   UTF-8 JSON, hlen bytes: {"meta": {...}, "arrays": [{"name", "shape", "offset"}]}
    body     concatenated little-endian float64 arrays
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"RANK1BNN\x00CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_arrays(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a rank1bnn checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 10:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<HQ", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 10
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = raw[pos + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * count > len(body):
            raise CheckpointError(f"{path}: truncated body at array {entry['name']!r}")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return arrays, header["meta"]


@dataclass
class Checkpoint:
    epoch: int
    params: Dict[str, np.ndarray]
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"momentum/{k}": v for k, v in self.momentum.items()})
        meta = {"epoch": self.epoch, "rng_state": self.rng_state, "config": self.config}
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        momentum = {k[len("momentum/"):]: v for k, v in arrays.items() if k.startswith("momentum/")}
        return cls(meta["epoch"], params, momentum, meta.get("rng_state", {}), meta.get("config", {}))
