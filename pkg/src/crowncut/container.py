"""Binary envelope shared by ``.unet`` and ``.qunet`` model files.

Layout::

    8 bytes   magic  b"CRWNCUT\\x00"
    4 bytes   header length (uint32, little-endian)
    n bytes   UTF-8 JSON header
    ...       raw little-endian tensor blobs, in manifest order

The header holds a ``manifest`` list of ``{name, dtype, shape, offset,
nbytes}`` entries with offsets relative to the first blob byte, plus any
caller metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import MalformedModelFile

MAGIC = b"CRWNCUT\x00"
FORMAT_VERSION = 1
_DTYPES = {"f4": "<f4", "i1": "|i1", "u1": "|u1", "i4": "<i4"}


def write_container(path, header: dict, tensors: list[tuple[str, np.ndarray]]) -> int:
    """Write ``tensors`` after a JSON ``header``; returns the blob payload size."""
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors:
        code = np.dtype(arr.dtype).str[1:]
        if code not in _DTYPES:
            raise TypeError(f"unsupported tensor dtype {arr.dtype} for {name}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        manifest.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    doc = dict(header, format_version=FORMAT_VERSION, manifest=manifest)
    head = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return offset


def read_container(path) -> tuple[dict, dict]:
    """Return ``(header, {name: array})``; any inconsistency raises MalformedModelFile."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise MalformedModelFile(f"{path}: not a crowncut model file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise MalformedModelFile(f"{path}: header truncated")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        manifest = header["manifest"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedModelFile(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise MalformedModelFile(f"{path}: unsupported format version {header.get('format_version')}")
    base = 12 + hlen
    tensors = {}
    expected = 0
    for entry in manifest:
        try:
            name, code, shape = entry["name"], entry["dtype"], tuple(int(v) for v in entry["shape"])
            off, nbytes = int(entry["offset"]), int(entry["nbytes"])
            dt = np.dtype(_DTYPES[code])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedModelFile(f"{path}: bad manifest entry ({exc})") from None
        if off != expected or nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise MalformedModelFile(f"{path}: manifest entry {name} is inconsistent")
        if base + off + nbytes > len(raw):
            raise MalformedModelFile(f"{path}: tensor {name} truncated")
        tensors[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=base + off).reshape(shape).copy()
        expected += nbytes
    if base + expected != len(raw):
        raise MalformedModelFile(f"{path}: {len(raw) - base - expected} trailing bytes")
    return header, tensors
