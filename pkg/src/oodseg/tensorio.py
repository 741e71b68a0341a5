"""Flat binary container for 2-D and 3-D maps (feature maps, label maps,
score maps, statistics, head parameters).

Wire layout, all little-endian:

    magic    4 bytes  b"OODS"
    version  u32      currently 1
    dtype    u8       0 = float32, 1 = int32, 2 = float64
    kind     u8       what the payload is (see KIND_CODES)
    rank     u8       2 or 3
    dims     rank*u32
    payload  prod(dims) * itemsize, row-major

One parser for every map kind; readers that do not care about the kind can
ignore it. Files use the ``.oods`` extension by convention (not enforced
here). Writes are not atomic; concurrent writers to one path are the
caller's problem.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"OODS"
VERSION = 1

# payload dtype codes on the wire
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<f8")}
_DTYPE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.int32): 1, np.dtype(np.float64): 2}

KIND_CODES = {
    "generic": 0,
    "feature": 1,
    "logit": 2,
    "prob": 3,
    "label": 4,
    "score": 5,
    "stats": 6,
    "head": 7,
}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

_MAX_DIM = 2**32 - 1


class TensorFormatError(ValueError):
    """Raised when bytes on disk do not parse as a tensor file."""


@dataclass
class TensorFile:
    """In-memory view of one container: the array plus its kind tag."""

    values: np.ndarray
    kind: str = "generic"

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        if self.values.ndim not in (2, 3):
            raise ValueError(f"unsupported rank {self.values.ndim}: only rank 2 and 3 maps are stored")
        if self.values.dtype not in _DTYPE_FOR_KIND:
            raise ValueError(f"unsupported dtype {self.values.dtype}: use float32, int32, or float64")
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown kind {self.kind!r}")
        if any(d < 1 for d in self.values.shape):
            raise ValueError("all dimensions must be >= 1")
        if any(d > _MAX_DIM for d in self.values.shape):
            raise ValueError("dimension overflow: dims must fit in an unsigned 32-bit field")


def encode(tensor: TensorFile) -> bytes:
    """Serialize to the wire format. Bit-exact: payload bytes are the array's
    own little-endian representation."""
    arr = tensor.values
    dtype_code = _DTYPE_FOR_KIND[arr.dtype]
    header = MAGIC + struct.pack(
        "<IBBB", VERSION, dtype_code, KIND_CODES[tensor.kind], arr.ndim
    )
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode(data: bytes) -> TensorFile:
    """Parse wire bytes back into a TensorFile. Strict: trailing bytes,
    short payloads, bad magic, unknown codes all raise TensorFormatError."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise TensorFormatError("bad magic: not a tensor container")
    off = 4
    if len(data) < off + 7:
        raise TensorFormatError("truncated header")
    version, dtype_code, kind_code, rank = struct.unpack_from("<IBBB", data, off)
    off += 7
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype_code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {dtype_code}")
    if rank not in (2, 3):
        raise TensorFormatError(f"unsupported rank {rank}")
    if kind_code not in _KIND_NAMES:
        raise TensorFormatError(f"unknown kind code {kind_code}")
    if len(data) < off + 4 * rank:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    if any(d < 1 for d in dims):
        raise TensorFormatError("zero-sized dimension")
    dtype = DTYPE_CODES[dtype_code]
    n_payload = int(np.prod([int(d) for d in dims], dtype=np.int64)) * dtype.itemsize
    if len(data) - off < n_payload:
        raise TensorFormatError("truncated payload")
    if len(data) - off > n_payload:
        raise TensorFormatError("trailing data after payload")
    values = np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=off)
    values = values.reshape(dims).astype(dtype.newbyteorder("="))
    return TensorFile(values=values, kind=_KIND_NAMES[kind_code])


def write_tensor(path, values: np.ndarray | TensorFile, kind: str = "generic") -> None:
    """Write one map to ``path``. ``values`` may be a bare array (kind given
    separately) or a TensorFile."""
    if not isinstance(values, TensorFile):
        values = TensorFile(values=values, kind=kind)
    with open(path, "wb") as f:
        f.write(encode(values))


def read_tensor(path) -> TensorFile:
    with open(path, "rb") as f:
        return decode(f.read())


def write_sidecar(path, entries: dict) -> None:
    """Plain-text key = value sidecar, one entry per line, written in the
    given order. Floats are rendered with repr so they round-trip exactly."""
    lines = []
    for key, value in entries.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    entries: dict[str, str] = {}
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed sidecar line: {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries
