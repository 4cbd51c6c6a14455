"""Binary model container: typed, versioned, checksummed tensor records.

Layout (all integers little-endian)::

    magic   4 bytes  b"TBST"
    version u16
    type    u16      1 = LSTM, 2 = GBT
    count   u32      number of records
    records          repeated: name_len u16, name utf-8,
                               dtype_code u8, ndim u8, shape u64 * ndim,
                               nbytes u64, payload
    crc32   u32      zlib CRC-32 of every preceding byte

Metadata (configs, feature names, normalization stats) travels as a
``uint8`` record named ``__meta__`` holding UTF-8 JSON.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"TBST"
VERSION = 1
TYPE_LSTM = 1
TYPE_GBT = 2
TYPE_NAMES = {TYPE_LSTM: "lstm", TYPE_GBT: "gbt"}
META = "__meta__"

# code -> little-endian dtype
_DTYPES = {1: "<f8", 2: "<f4", 3: "<i8", 4: "<i4", 5: "u1", 6: "<i2"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    """Base class for unreadable containers."""


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ModelTypeError(ContainerError):
    pass


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    le = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|", "<", "=") else a.dtype
    a = a.astype(le, copy=False)
    code = _CODES.get(np.dtype(a.dtype).str)
    if code is None:
        raise TypeError(f"tensor {name!r}: unsupported dtype {a.dtype}")
    raw_name = name.encode("utf-8")
    payload = np.ascontiguousarray(a).tobytes()
    head = struct.pack("<H", len(raw_name)) + raw_name
    head += struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + struct.pack("<Q", len(payload)) + payload


def pack(type_tag: int, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    if type_tag not in TYPE_NAMES:
        raise ValueError(f"unknown type tag {type_tag}")
    records = dict(tensors)
    if META in records:
        raise ValueError(f"{META!r} is reserved")
    if meta is not None:
        text = json.dumps(meta, sort_keys=True, allow_nan=True)
        records[META] = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
    body = MAGIC + struct.pack("<HHI", VERSION, type_tag, len(records))
    body += b"".join(_encode_tensor(k, v) for k, v in records.items())
    return body + struct.pack("<I", zlib.crc32(body))


def unpack(blob: bytes, expect_type: int | None = None) -> tuple[int, dict[str, np.ndarray], dict[str, Any]]:
    """Decode a container.

    Returns:
        ``(type_tag, tensors, meta)``.

    Raises:
        ChecksumError: corrupted bytes.
        VersionError: unknown format version.
        ModelTypeError: ``expect_type`` given and the container holds another model type.
    """
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ContainerError("not a TBST container")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch: container is corrupted")
    version, type_tag, count = struct.unpack_from("<HHI", body, 4)
    if version != VERSION:
        raise VersionError(f"container version {version}, this build reads {VERSION}")
    if expect_type is not None and type_tag != expect_type:
        raise ModelTypeError(
            f"container holds a {TYPE_NAMES.get(type_tag, type_tag)} model, "
            f"expected {TYPE_NAMES[expect_type]}"
        )
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            dt = np.dtype(_DTYPES[code])
            arr = np.frombuffer(body[pos:pos + nbytes], dtype=dt).reshape(shape)
            pos += nbytes
            tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    except (struct.error, KeyError, ValueError) as exc:
        raise ContainerError(f"malformed record: {exc}") from exc
    if pos != len(body):
        raise ContainerError("trailing bytes after the last record")
    meta_arr = tensors.pop(META, None)
    meta = json.loads(meta_arr.tobytes().decode("utf-8")) if meta_arr is not None else {}
    return type_tag, tensors, meta


def write(path: str | Path, type_tag: int, tensors: Mapping[str, np.ndarray],
          meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(pack(type_tag, tensors, meta))


def read(path: str | Path, expect_type: int | None = None):
    return unpack(Path(path).read_bytes(), expect_type)
