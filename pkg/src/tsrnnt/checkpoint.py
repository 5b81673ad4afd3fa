"""Flat binary parameter container.

Layout::

    8 bytes   magic  b"TSRNNTCK"
    4 bytes   format version (uint32 LE)
    4 bytes   header length in bytes (uint32 LE)
    N bytes   UTF-8 JSON header
    ...       concatenated little-endian arrays

The header records the model config hash, an optional config dict, free-form
metadata, a SHA-256 of the payload and, per entry, its path, shape, dtype,
offset and byte length. Model checkpoints are stored as float32; training
state uses float64 so resumed runs continue bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, IntegrityError
from .tensor import Tensor

MAGIC = b"TSRNNTCK"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def config_hash(config: Mapping) -> str:
    """Stable SHA-256 of a JSON-serialisable config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params: Mapping, cfg_hash: str, *, config: Mapping | None = None,
                    meta: Mapping | None = None, dtype: str = "float32") -> Path:
    """Write ``params`` (name -> array or Tensor) to ``path`` atomically."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config_hash": cfg_hash,
        "config": dict(config) if config is not None else None,
        "meta": dict(meta or {}),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "entries": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    return _read(path)[0]


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[dict, dict]:
    """Return ``(params, header)``; arrays come back in their stored dtype.

    Raises :class:`IntegrityError` when the payload checksum fails or the
    stored config hash differs from ``expected_hash``.
    """
    header, payload = _read(path)
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload checksum mismatch (corrupted checkpoint)")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise IntegrityError(
            f"{path}: config hash {header['config_hash'][:12]} does not match expected {expected_hash[:12]}")
    params = {}
    for e in header["entries"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        params[e["name"]] = arr.astype(e["dtype"])
    return params, header


def _read(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a tsrnnt checkpoint")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if len(blob) < 16 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header ({exc})") from exc
    payload = blob[16 + hlen:]
    expected = sum(e["nbytes"] for e in header["entries"])
    if len(payload) != expected:
        raise IntegrityError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    return header, payload

