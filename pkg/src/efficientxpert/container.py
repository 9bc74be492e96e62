"""Named-tensor binary container.

Byte layout, little-endian throughout:

    magic    4 bytes  b"XPTC"
    version  u32      format major version (currently 1)
    hlen     u64      byte length of the UTF-8 header that follows
    header   hlen bytes of JSON: {name: {"dtype", "shape", "offset", "nbytes"}}
    payload  concatenated raw tensor bytes

Offsets are relative to the start of the payload. Supported dtypes are
"f64", "f32" and "u8"; u8 exists solely for masks and is validated to be
{0,1}-valued on read. Round-trips are bitwise lossless.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = [
    "FORMAT_VERSION",
    "ContainerError",
    "MalformedHeaderError",
    "OverlappingOffsetsError",
    "TruncatedPayloadError",
    "UnsupportedVersionError",
    "save_container",
    "load_container",
]

MAGIC = b"XPTC"
FORMAT_VERSION = 1

_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {np.dtype("float64"): "f64", np.dtype("float32"): "f32", np.dtype("uint8"): "u8"}


class ContainerError(Exception):
    """Base class for container format failures."""


class MalformedHeaderError(ContainerError):
    """Bad magic, unreadable JSON, or an inconsistent header entry."""


class OverlappingOffsetsError(ContainerError):
    """Two header entries claim overlapping payload ranges."""


class TruncatedPayloadError(ContainerError):
    """A header entry points past the end of the payload."""


class UnsupportedVersionError(ContainerError):
    """The file declares a format major version this reader does not know."""


def _check_name(name: str) -> None:
    if not name:
        raise ValueError("tensor names must be nonempty")
    if not all(32 <= ord(c) < 127 for c in name):
        raise ValueError(f"tensor name {name!r} must be ASCII-printable")


def save_container(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a name -> array mapping. Arrays must be float64, float32 or
    uint8; names are sorted so identical contents produce identical bytes.
    """
    index: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        _check_name(name)
        arr = np.asarray(tensors[name])
        if arr.dtype not in _DTYPE_NAMES:
            raise ValueError(
                f"tensor {name!r} has unsupported dtype {arr.dtype}; "
                "use float64, float32 or uint8"
            )
        dtype_name = _DTYPE_NAMES[arr.dtype]
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype_name], copy=False).tobytes()
        index[name] = {
            "dtype": dtype_name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def _parse_entry(name: str, entry) -> tuple[np.dtype, tuple[int, ...], int, int]:
    if not isinstance(entry, dict):
        raise MalformedHeaderError(f"entry for {name!r} is not an object")
    try:
        dtype_name = entry["dtype"]
        shape = tuple(int(d) for d in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(entry["nbytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"entry for {name!r} is missing or malformed: {exc}") from exc
    if dtype_name not in _DTYPES:
        raise MalformedHeaderError(f"entry for {name!r} has unknown dtype {dtype_name!r}")
    dtype = _DTYPES[dtype_name]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
    if any(d < 0 for d in shape) or nbytes != expected:
        raise MalformedHeaderError(
            f"entry for {name!r}: nbytes {nbytes} != prod{shape} * {dtype.itemsize}"
        )
    if offset < 0:
        raise MalformedHeaderError(f"entry for {name!r} has negative offset")
    return dtype, shape, offset, nbytes


def load_container(path) -> dict[str, np.ndarray]:
    """Read a container back into a name -> array dict (native byte order)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise MalformedHeaderError("not a tensor container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"file declares format version {version}, reader supports {FORMAT_VERSION}"
        )
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if 16 + hlen > len(blob):
        raise MalformedHeaderError("header extends past end of file")
    try:
        index = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(index, dict):
        raise MalformedHeaderError("header root must be an object")
    payload = memoryview(blob)[16 + hlen :]

    spans = []
    out: dict[str, np.ndarray] = {}
    for name, entry in index.items():
        if not isinstance(name, str):
            raise MalformedHeaderError("tensor names must be strings")
        try:
            _check_name(name)
        except ValueError as exc:
            raise MalformedHeaderError(str(exc)) from exc
        dtype, shape, offset, nbytes = _parse_entry(name, entry)
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"tensor {name!r} needs bytes [{offset}, {offset + nbytes}) but "
                f"payload has {len(payload)}"
            )
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(shape)
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        if dtype == _DTYPES["u8"] and arr.size and not np.all((arr == 0) | (arr == 1)):
            raise ContainerError(f"u8 tensor {name!r} contains values outside {{0, 1}}")
        out[name] = arr

    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OverlappingOffsetsError(f"tensors {n0!r} and {n1!r} overlap in the payload")
    return out
