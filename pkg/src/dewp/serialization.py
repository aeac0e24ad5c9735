"""Versioned, checksummed single-file container for arrays plus JSON metadata.

Layout (little-endian)::

    magic        8 bytes   b"DEWPBLOB"
    version      uint16
    payload_len  uint64
    sha256       32 bytes  digest of the payload
    payload      uint32 header length, UTF-8 JSON header, raw array bytes

The header lists ``kind``, free-form ``meta`` and, for each array, its
name, dtype, shape and byte offset.  Nothing is decoded until the length
and checksum have been verified, so a damaged file never loads partially.
Output is byte-for-byte deterministic for equal inputs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    CheckpointError,
    DataFormatError,
    TruncatedFileError,
    VersionError,
)

MAGIC = b"DEWPBLOB"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHQ32s")
_HEADER_LEN = struct.Struct("<I")
_DTYPES = {"<f8": np.float64, "<i8": np.int64}


class CorruptFileError(CheckpointError, DataFormatError):
    """Structural damage that is neither truncation nor a checksum mismatch."""


def pack(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).astype(code, copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
        allow_nan=False,
    ).encode("utf-8")
    payload = _HEADER_LEN.pack(len(header)) + header + b"".join(chunks)
    digest = hashlib.sha256(payload).digest()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(payload), digest) + payload


def unpack(blob: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise TruncatedFileError(f"file holds {len(blob)} bytes, shorter than the fixed prefix")
    magic, version, length, digest = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptFileError("not a DEWP container (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"format version {version}, this build reads {FORMAT_VERSION}")
    payload = blob[_PREFIX.size :]
    if len(payload) < length:
        raise TruncatedFileError(f"payload has {len(payload)} of {length} bytes")
    if len(payload) > length:
        raise CorruptFileError(f"{len(payload) - length} unexpected trailing bytes")
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError("payload checksum mismatch")

    (hlen,) = _HEADER_LEN.unpack_from(payload)
    header = json.loads(payload[_HEADER_LEN.size : _HEADER_LEN.size + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CorruptFileError(f"expected a {kind!r} file, found {header['kind']!r}")
    base = _HEADER_LEN.size + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        flat = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return header["meta"], arrays


def write_file(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write the container and return the SHA-256 hex digest of the file."""
    blob = pack(kind, meta, arrays)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_file(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes(), kind)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
