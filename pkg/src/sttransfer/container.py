"""Single-file, versioned, checksummed container for tensors plus a text manifest.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"STXF"
    4       2     format version (u16), currently 1
    6       2     kind (u16): 1 checkpoint, 2 transfer bundle, 3 dataset
    8       8     manifest length M (u64)
    16      M     manifest: UTF-8 JSON object {"meta": {...}, "blobs": [...]}
    16+M    ...   blob payloads, back to back, raw little-endian
    end-32  32    SHA-256 over every preceding byte

Each ``blobs`` entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``
where ``offset`` counts from the first payload byte and ``dtype`` is one of
``<f4``, ``<f8``, ``|u1``, ``<i8``. The manifest is written with sorted keys
and no timestamps, so identical inputs give identical files.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STXF"
FORMAT_VERSION = 1
KINDS = {"checkpoint": 1, "bundle": 2, "dataset": 3}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_CODES = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8", np.dtype(np.uint8): "|u1", np.dtype(np.int64): "<i8"}
_DTYPES = set(_CODES.values())
_HEADER = struct.Struct("<4sHHQ")
_DIGEST_LEN = 32


class ContainerError(ValueError):
    """Corrupt, truncated, or incompatible container file."""


def write_container(path, kind: str, meta: dict, blobs: dict[str, np.ndarray]) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown container kind {kind!r}")
    entries = []
    payload = []
    offset = 0
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise ValueError(f"blob {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "blobs": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    h = hashlib.sha256()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for chunk in (_HEADER.pack(MAGIC, FORMAT_VERSION, KINDS[kind], len(manifest)), manifest, *payload):
            h.update(chunk)
            fh.write(chunk)
        fh.write(h.digest())
    os.replace(tmp, path)


def read_container(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, blobs)``; raises :class:`ContainerError` on any inconsistency."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _DIGEST_LEN:
        raise ContainerError(f"{path}: file too short to be a container")
    magic, version, kind_code, mlen = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    body, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch (truncated or corrupted file)")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    kind = _KIND_NAMES.get(kind_code)
    if kind is None:
        raise ContainerError(f"{path}: unknown kind code {kind_code}")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"{path}: expected a {expect_kind} container, found {kind}")
    start = _HEADER.size
    try:
        manifest = json.loads(body[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable manifest") from exc
    payload_start = start + mlen
    blobs = {}
    for e in manifest["blobs"]:
        lo = payload_start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(body) or e["dtype"] not in _DTYPES:
            raise ContainerError(f"{path}: blob {e['name']!r} out of bounds or of unknown dtype")
        arr = np.frombuffer(body, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        blobs[e["name"]] = arr.reshape(e["shape"]).copy()
    return manifest["meta"], blobs


def sha256_arrays(arrays) -> str:
    """Digest of a sequence of ``(name, array)`` pairs, dtype- and shape-aware."""
    h = hashlib.sha256()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(arr.dtype.str.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
