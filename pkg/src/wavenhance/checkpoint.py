"""Binary named-tensor archive.

Layout (all integers little-endian)::

    b"R2MW" | u32 version | u64 count
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | float64 data )
    u32 crc32 of everything before it
"""
from __future__ import annotations

import os
import struct
import zlib
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"R2MW"
VERSION = 1

# Sanity limits used only to tell corruption from truncation after a CRC mismatch.
_MAX_NAME = 1 << 16
_MAX_RANK = 16
_MAX_DIM = 1 << 32


class CheckpointError(Exception):
    """Base class for archive decoding failures."""


class CheckpointFormatError(CheckpointError):
    """Not an archive of this kind (bad magic)."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", version, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _parse(buf: bytes, end: int, plausible: bool = False) -> tuple[dict[str, np.ndarray], int]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("missing R2MW magic bytes")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise CheckpointTruncatedError(f"archive ends at byte {end}, needed {pos + n}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointVersionError(f"archive version {version}, this build reads version {VERSION}")
    (count,) = struct.unpack("<Q", take(8))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        if plausible and nlen > _MAX_NAME:
            raise CheckpointFormatError(f"implausible name length {nlen}")
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"tensor name is not UTF-8: {exc}") from None
        (rank,) = struct.unpack("<I", take(4))
        if plausible and rank > _MAX_RANK:
            raise CheckpointFormatError(f"implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        if plausible and any(d > _MAX_DIM for d in dims):
            raise CheckpointFormatError(f"implausible dimensions {dims}")
        size = 1
        for d in dims:
            size *= d
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    return out, pos


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    """Decode an archive, raising a distinct error for each failure kind.

    A checksum mismatch is reported as truncation when a plausible structure
    runs past the end of the data, and as corruption otherwise.
    """
    if not (buf[:4] == MAGIC or (len(buf) < 4 and MAGIC.startswith(buf))):
        raise CheckpointFormatError("missing R2MW magic bytes")
    if len(buf) < 4 + 4 + 8 + 4:
        raise CheckpointTruncatedError(f"only {len(buf)} bytes, shorter than an empty archive")
    end = len(buf) - 4
    (crc,) = struct.unpack("<I", buf[end:])
    if crc == zlib.crc32(buf[:end]):
        out, pos = _parse(buf, end)
        if pos != end:
            raise CheckpointFormatError(f"{end - pos} unexpected bytes before the checksum")
        return out
    try:
        _, pos = _parse(buf, len(buf), plausible=True)
    except CheckpointTruncatedError:
        raise
    except CheckpointError:
        pass
    else:
        if pos > end:
            raise CheckpointTruncatedError(f"checksum cut short: {len(buf) - pos} of 4 bytes present")
    raise CheckpointChecksumError("CRC32 mismatch: archive is corrupted")


def write_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
