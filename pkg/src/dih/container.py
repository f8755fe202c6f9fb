"""Binary container used for network and cohort checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"DIHCKPT\\0"
    version    uint32    FORMAT_VERSION
    hdr_len    uint32    length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON, keys sorted, no whitespace
    payload    ...       concatenated '<f8' arrays, in header["arrays"] order
    crc32      uint32    zlib.crc32 of everything above

``header["arrays"]`` lists ``[name, shape]`` pairs; the payload length must
equal the sum of their element counts times eight.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from dih.errors import ArtifactNotFoundError, ChecksumMismatchError, MalformedHeaderError

MAGIC = b"DIHCKPT\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def pack(header: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["arrays"] = [[name, list(arr.shape)] for name, arr in arrays]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hdr)))
    body += hdr
    for _, arr in arrays:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


def unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size + 4:
        raise MalformedHeaderError("checkpoint is truncated before the header")
    magic, version, hdr_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(blob) < start + hdr_len + 4:
        raise MalformedHeaderError("checkpoint is truncated inside the header")
    try:
        header = json.loads(blob[start:start + hdr_len].decode("utf-8"))
        specs = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["arrays"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"unreadable checkpoint header: {exc}") from exc
    offset = start + hdr_len
    expected = offset + 8 * sum(int(np.prod(shape, dtype=np.int64)) for _, shape in specs) + 4
    if len(blob) != expected:
        raise MalformedHeaderError(f"checkpoint size {len(blob)} does not match header ({expected})")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc != zlib.crc32(blob[:-4]):
        raise ChecksumMismatchError("checkpoint checksum mismatch")
    arrays = {}
    for name, shape in specs:
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    return header, arrays


def read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise ArtifactNotFoundError(f"no such file: {path}")
    return path.read_bytes()
