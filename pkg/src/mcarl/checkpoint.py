"""Single-file checkpoint container and run-directory manifest.

Layout::

    b"MCARLCKPT\\n"
    uint64 LE header length
    header: UTF-8 JSON (sorted keys) with version, array records and metadata
    payload: little-endian arrays back to back, in header order
    32-byte SHA-256 of everything above

Arrays are stored in sorted-name order so that save -> load -> save gives
the same bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MCARLCKPT\n"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


def _tag(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "f8"
    if kind in "iu":
        return "i8"
    if kind == "b":
        return "b1"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def encode(arrays: dict, meta: dict) -> bytes:
    records, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        tag = _tag(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        records.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"version": FORMAT_VERSION, "arrays": records, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, expect_version: int = FORMAT_VERSION):
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity check failed (checksum mismatch)")
    (hlen,) = struct.unpack("<Q", body[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(body[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("checkpoint header unreadable") from exc
    version = header.get("version")
    if version != expect_version:
        raise CheckpointError(f"checkpoint version mismatch: expected {expect_version}, found {version}")
    payload = body[start + hlen:]
    arrays = {}
    for rec in header["arrays"]:
        raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise CheckpointError(f"array {rec['name']} truncated")
        arr = np.frombuffer(raw, dtype=_DTYPES[rec["dtype"]]).reshape(rec["shape"]).copy()
        arrays[rec["name"]] = arr
    return arrays, header["meta"]


def save_checkpoint(path, arrays: dict, meta: dict) -> str:
    """Write atomically; returns the sha256 hex digest of the file."""
    blob = encode(arrays, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def inspect_checkpoint(path) -> dict:
    arrays, meta = load_checkpoint(path)
    return {
        "version": FORMAT_VERSION,
        "iteration": meta.get("iteration"),
        "variant": meta.get("config", {}).get("variant"),
        "seed": meta.get("config", {}).get("seed"),
        "arrays": len(arrays),
        "parameters": int(sum(a.size for k, a in arrays.items() if "/param/" in k)),
        "metrics": meta.get("metrics", {}),
    }


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path) -> str:
    return git_blob_hash(Path(path).read_bytes())


def write_manifest(run_dir) -> dict:
    run_dir = Path(run_dir)
    entries = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"):
            entries[p.relative_to(run_dir).as_posix()] = file_hash(p)
    (run_dir / "manifest.json").write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return entries
