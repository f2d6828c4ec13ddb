"""Binary container: JSON header followed by raw little-endian float64 arrays.

Layout::

    b"DIFFINV1"                 8-byte magic
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON, keys sorted
    payload                     arrays in header["arrays"] order, C order, <f8

The header lists every array as ``{"name": ..., "shape": [...]}`` and
records ``payload_sha256`` so identical payloads can be checked cheaply.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataIOError

MAGIC = b"DIFFINV1"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(obj) -> str:
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_container(path, header: dict, arrays) -> Path:
    """Write ``arrays`` (sequence of ``(name, ndarray)``) with ``header``."""
    path = Path(path)
    items = [(str(n), np.ascontiguousarray(a, dtype="<f8")) for n, a in arrays]
    payload = b"".join(a.tobytes() for _, a in items)
    head = dict(_jsonable(header))
    head["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in items]
    head["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(payload)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    return path


def read_container(path):
    """Return ``(header, {name: array})``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise DataIOError(f"{path} is not a container file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise DataIOError(f"{path} is truncated")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    return header, arrays


def payload_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    return raw[16 + hlen:]
