"""Stub backbones behind a tiny model-reference grammar.

A reference is ``name`` or ``name:key=value,key=value``, e.g.

    constant
    constant:dim=8,classes=3,value=0.25
    random:dim=16,classes=5,seed=7

Real deployments would register an adapter here that loads an actual frozen
encoder + head; the stubs exist so the export path, the file format, and
the downstream contract can be exercised without model weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConstantStub:
    """Emits the same feature value everywhere and all-zero logits."""

    dim: int = 8
    classes: int = 3
    value: float = 0.5

    def describe(self) -> str:
        return f"constant(dim={self.dim}, classes={self.classes}, value={self.value!r})"

    def apply(self, tile_id: str, tile_bytes: bytes, shift: tuple, side: int):
        features = np.full((self.dim, side, side), self.value, dtype=np.float32)
        logits = np.zeros((self.classes, side, side), dtype=np.float32)
        return features, logits


def _shift_rng(seed: int, tile_id: str, shift: tuple) -> np.random.Generator:
    # hash-based so the stream depends only on (seed, tile, shift); python's
    # built-in str hash is salted per process and would break re-export
    key = f"{seed}|{tile_id}|{shift[0]}|{shift[1]}".encode()
    digest = hashlib.sha256(key).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class RandomStub:
    """Standard-normal features and logits, reproducible per (tile, shift)."""

    dim: int = 8
    classes: int = 3
    seed: int = 0

    def describe(self) -> str:
        return f"random(dim={self.dim}, classes={self.classes}, seed={self.seed})"

    def apply(self, tile_id: str, tile_bytes: bytes, shift: tuple, side: int):
        rng = _shift_rng(self.seed, tile_id, shift)
        features = rng.standard_normal((self.dim, side, side)).astype(np.float32)
        logits = rng.standard_normal((self.classes, side, side)).astype(np.float32)
        return features, logits


_STUBS = {"constant": ConstantStub, "random": RandomStub}
_INT_PARAMS = {"dim", "classes", "seed"}
_FLOAT_PARAMS = {"value"}


def resolve_model(ref: str):
    """Instantiate the stub a model reference names."""
    name, _, tail = ref.partition(":")
    name = name.strip()
    if name not in _STUBS:
        known = ", ".join(sorted(_STUBS))
        raise ValueError(f"unknown model reference {name!r}: known stubs are {known}")
    params = {}
    if tail:
        for part in tail.split(","):
            if "=" not in part:
                raise ValueError(f"malformed model parameter {part!r}: expected key=value")
            key, value = part.split("=", 1)
            key = key.strip()
            if key in _INT_PARAMS:
                params[key] = int(value)
            elif key in _FLOAT_PARAMS:
                params[key] = float(value)
            else:
                raise ValueError(f"unknown model parameter {key!r}")
    try:
        model = _STUBS[name](**params)
    except TypeError as exc:
        raise ValueError(f"model {name!r} does not take those parameters: {exc}") from exc
    if model.dim < 1:
        raise ValueError("model must emit at least one feature channel")
    if model.classes < 2:
        raise ValueError("model must emit at least two logit channels")
    return model
