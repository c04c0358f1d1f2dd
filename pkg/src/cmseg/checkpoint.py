"""Byte-stable checkpoint files.

Layout: ``b"CSGK"``, u32 version, u32 header length, a sorted-key JSON header,
then every tensor's little-endian bytes back to back in header order.  No
timestamps are written, so identical state gives identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BadMagicError, TruncatedPayloadError, VersionMismatchError

MAGIC = b"CSGK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class ConfigMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    config_hash: str
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) + 1:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path, expected_hash: str | None = None, allow_mismatch: bool = False) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    if len(raw) < _PREFIX.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body = _PREFIX.size + hlen
    if len(raw) < body:
        raise TruncatedPayloadError(f"{path}: header truncated")
    header = json.loads(raw[_PREFIX.size:body])
    payload = raw[body:]
    total = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != total:
        raise TruncatedPayloadError(f"{path}: payload is {len(payload)} bytes, expected {total}")
    if expected_hash is not None and header["config_hash"] != expected_hash and not allow_mismatch:
        raise ConfigMismatchError(f"{path}: config hash {header['config_hash']} != {expected_hash}")
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return Checkpoint(tensors, header["config"], header["config_hash"], header["step"], header["epoch"],
                      header["rng_state"], header.get("extra", {}))
