"""Checkpoint container: parameters, config, step counter and RNG state in one
self-describing binary file.

Layout: magic ``GLBC``, uint32 format version, uint64 header length, a
canonical JSON header (kind, config, step, hex RNG state, array manifest,
payload digest), then the raw little-endian array bytes. Arrays are stored
sorted by name and the header JSON is emitted with sorted keys, so
save -> load -> save is byte-identical. The payload digest catches silent
corruption; version or magic mismatches refuse to load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GLBC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_DTYPES = {"float32": np.float32, "float64": np.float64,
           "int64": np.int64, "uint8": np.uint8}


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int
    rng_state: bytes
    arrays: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, *, kind: str, config: dict, step: int,
                    rng_state: bytes, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported array dtype {arr.dtype} for {name!r}")
        raw = arr.tobytes()  # C-order bytes regardless of input layout
        manifest.append({"name": name, "dtype": arr.dtype.name,
                         "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "kind": kind,
        "config": config,
        "step": int(step),
        "rng": rng_state.hex(),
        "arrays": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read {path}: {err}") from err
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {VERSION})")
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header: {err}") from err

    payload = raw[header_end:]
    expected = sum(m["nbytes"] for m in header["arrays"])
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest expects "
            f"{expected} (truncated or padded file)")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    arrays = {}
    for meta in header["arrays"]:
        dtype = _DTYPES.get(meta["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype {meta['dtype']!r}")
        start, n = meta["offset"], meta["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=dtype)
        arrays[meta["name"]] = arr.reshape(meta["shape"]).copy()
    return Checkpoint(kind=header["kind"], config=header["config"],
                      step=int(header["step"]),
                      rng_state=bytes.fromhex(header["rng"]), arrays=arrays)
