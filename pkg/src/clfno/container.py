"""Binary container shared by checkpoints, datasets, method state and detectors.

Layout::

    MAGIC (8 bytes) | header length (uint32, little-endian) | JSON header | payload

The JSON header lists every payload block (name, shape, dtype, offset, size,
optional per-block attributes), the container kind, the format version, free
metadata, and a SHA-256 checksum of the payload. All arrays are stored
little-endian. Header JSON is written with sorted keys so that a load/save
round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"CLFNOBIN"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<c8", "<c16"}


class ContainerError(Exception):
    """Malformed or unreadable container file."""


class VersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(kind: str, blocks: list[tuple[str, np.ndarray, dict]], meta: dict | None = None) -> bytes:
    """Serialize named arrays into container bytes.

    ``blocks`` holds ``(name, array, attrs)`` triples; ``attrs`` is stored
    verbatim next to the block description (e.g. a trainable flag).
    """
    entries = []
    chunks = []
    offset = 0
    seen = set()
    for name, array, attrs in blocks:
        if name in seen:
            raise ContainerError(f"duplicate block name {name!r}")
        seen.add(name)
        arr = np.asarray(array)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for block {name!r}")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
            "nbytes": len(raw),
            "attrs": dict(attrs),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "blocks": entries,
        "meta": meta or {},
        "checksum": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
    }
    head = _canonical_json(header)
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def decode(data: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse container bytes into ``(header, {name: array})``."""
    if len(data) < len(MAGIC) + 4:
        raise TruncatedError("file shorter than the fixed preamble")
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic bytes")
    (head_len,) = struct.unpack("<I", data[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(data) < start + head_len:
        raise TruncatedError("header truncated")
    try:
        header = json.loads(data[start: start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header.get('kind')!r}")
    payload = data[start + head_len:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedError(f"payload has {len(payload)} bytes, header declares {header['payload_bytes']}")
    if len(payload) > header["payload_bytes"]:
        raise ContainerError("trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ChecksumError("payload checksum mismatch")
    arrays = {}
    for entry in header["blocks"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return header, arrays


def write(path: str | Path, kind: str, blocks: list[tuple[str, np.ndarray, dict]], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(kind, blocks, meta))


def read(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), kind)
