"""TensorRecord: a minimal dense float32 container.

Layout::

    b"TSRF" | u32 little-endian header length | UTF-8 JSON header | f32 LE payload

The header is ``{"dtype": "f32", "shape": [...], "order": "row-major"}``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSRF"
_LEN = struct.Struct("<I")


class TensorRecordError(ValueError):
    code = "E_RECORD"


class BadMagicError(TensorRecordError):
    code = "E_MAGIC"


class HeaderError(TensorRecordError):
    code = "E_HEADER"


class PayloadError(TensorRecordError):
    code = "E_PAYLOAD"


def dumps(array) -> bytes:
    a = np.asarray(array, dtype="<f4")
    header = json.dumps({"dtype": "f32", "shape": list(a.shape), "order": "row-major"},
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(header)) + header + np.ascontiguousarray(a).tobytes()


def loads(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise BadMagicError("not a TensorRecord (bad magic)")
    if len(blob) < 8:
        raise HeaderError("truncated before the header length")
    (hlen,) = _LEN.unpack_from(blob, 4)
    if 8 + hlen > len(blob):
        raise HeaderError(f"header length {hlen} runs past end of data")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"unparseable header: {e}") from None
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    if header.get("dtype") != "f32" or header.get("order") != "row-major":
        raise HeaderError(f"unsupported dtype/order in header {header}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool)
                                              and s >= 0 for s in shape):
        raise HeaderError(f"invalid shape {shape!r}")
    payload = blob[8 + hlen:]
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise PayloadError(f"payload has {len(payload)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_tensor(path: str | os.PathLike, array) -> None:
    Path(path).write_bytes(dumps(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return loads(Path(path).read_bytes())
