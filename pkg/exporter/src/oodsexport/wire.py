"""Writer for the `.oods` flat tensor container, plus the tile/shift
geometry the files must agree with downstream.

Byte layout (little-endian): magic b"OODS", version u32 = 1, dtype u8,
kind u8, rank u8, rank * u32 dims, then the row-major payload. This module
only ever writes float32 maps (dtype code 0); the consumer side owns the
full reader.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"OODS"
VERSION = 1

DTYPE_FLOAT32 = 0

# kind tags understood downstream
KIND_FEATURE = 1
KIND_LOGIT = 2
KIND_PROB = 3

_MAX_DIM = 2**32 - 1


def encode_f32(values: np.ndarray, kind: int) -> bytes:
    """Serialize one float32 map. Payload bytes are the array's own
    little-endian representation, so writes are bit-exact."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim not in (2, 3):
        raise ValueError(f"unsupported rank {arr.ndim}: only rank 2 and 3 maps are stored")
    if any(d < 1 for d in arr.shape):
        raise ValueError("all dimensions must be >= 1")
    if any(d > _MAX_DIM for d in arr.shape):
        raise ValueError("dimension overflow: dims must fit in an unsigned 32-bit field")
    if kind not in (KIND_FEATURE, KIND_LOGIT, KIND_PROB):
        raise ValueError(f"unknown kind code {kind}")
    header = MAGIC + struct.pack("<IBBB", VERSION, DTYPE_FLOAT32, kind, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def write_f32(path, values: np.ndarray, kind: int) -> None:
    with open(path, "wb") as f:
        f.write(encode_f32(values, kind))


@dataclass(frozen=True)
class TileGeometry:
    """Extended-tile geometry: T (tile side), t (inner window side), the
    shift stride, and the backbone's pixels-per-latent-cell factor.

    Validation mirrors the consumer's constraints so every emitted file is
    usable downstream without resampling.
    """

    tile: int = 672
    inner: int = 252
    stride: int = 84
    latent: int = 14

    def __post_init__(self):
        if self.stride < 1 or self.latent < 1:
            raise ValueError("stride and latent scale must be positive")
        if self.inner >= self.tile:
            raise ValueError("inner window must be smaller than the tile")
        if self.tile >= 3 * self.inner:
            raise ValueError("need tile < 3 * inner so every shift overlaps the inner window")
        if (self.tile - self.inner) % self.stride != 0:
            raise ValueError("stride must divide tile - inner")
        if (self.tile - self.inner) % 2 != 0:
            raise ValueError("tile - inner must be even so the inner window is pixel-aligned")
        if self.inner % self.latent != 0:
            raise ValueError("inner window must be divisible by the latent scale")
        if self.stride % self.latent != 0:
            raise ValueError("stride must be divisible by the latent scale")
        if ((self.tile - self.inner) // 2) % self.latent != 0:
            raise ValueError("inner window offset must land on the latent grid")

    @property
    def grid_side(self) -> int:
        """Latent cells per map side (t')."""
        return self.inner // self.latent

    def shifts(self) -> list[tuple[int, int]]:
        """All (x, y) sub-window origins in pixels, row-major."""
        steps = range(0, self.tile - self.inner + 1, self.stride)
        return [(x, y) for y in steps for x in steps]
