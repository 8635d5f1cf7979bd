"""Binary checkpoint container.

Layout::

    b"UF4D" | uint32 version | uint64 header length | header JSON | f64 payload

The header holds the config document, step counter, RNG states, free-form
metadata and a blob index ``[{name, shape, offset, count}]`` into the
little-endian float64 payload. Blob names are grouped by prefix:
``param/``, ``ema/``, ``adam_m/``, ``adam_v/`` and ``codec/``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"UF4D"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    step: int = 0
    rng: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    blobs: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.blobs.items() if k.startswith(p)}

    def put_group(self, prefix: str, arrays) -> None:
        p = prefix.rstrip("/") + "/"
        for k, v in arrays.items():
            self.blobs[p + k] = np.asarray(v, dtype=np.float64)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name in ckpt.blobs:
        arr = np.asarray(ckpt.blobs[name], dtype="<f8", order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {"config": ckpt.config, "step": int(ckpt.step), "rng": ckpt.rng, "meta": ckpt.meta, "blobs": index}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    blobs = {}
    for entry in header["blobs"]:
        a = payload[entry["offset"]:entry["offset"] + entry["count"]]
        blobs[entry["name"]] = a.astype(np.float64).reshape(entry["shape"])
    return Checkpoint(header["config"], header["step"], header["rng"], header["meta"], blobs)
