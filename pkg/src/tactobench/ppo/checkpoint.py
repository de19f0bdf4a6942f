"""Versioned binary checkpoint files.

Layout::

    magic (8 bytes) | version (u32 LE) | header length (u64 LE) | JSON header
    | zero padding to 8 bytes | raw array bytes ... | sha256 of everything before

The header lists every array's name, dtype, shape and offset (keys sorted),
and carries a free-form ``meta`` object.  Identical inputs give identical
bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"TBCKPT\x00\x01"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _encode(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    entries, blobs, off = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": off, "nbytes": len(raw)})
        pad = (-len(raw)) % 8
        blobs.append(raw + b"\x00" * pad)
        off += len(raw) + pad
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True,
                        separators=(",", ":")).encode()
    head = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
    head += b"\x00" * ((-len(head)) % 8)
    body = head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write atomically (temp file, fsync, rename)."""
    data = _encode(arrays, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < 8 + 12 + 32 or data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a tactobench checkpoint (expected version {VERSION})")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported; expected version {VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint {path} is corrupt (checksum mismatch; expected version {VERSION})")
    try:
        header = json.loads(data[20:20 + hlen])
    except ValueError as e:
        raise CheckpointError(f"checkpoint {path} has an unreadable header") from e
    base = 20 + hlen
    base += (-base) % 8
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = body[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
