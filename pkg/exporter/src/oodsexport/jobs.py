"""Export jobs: walk a tile directory, run the model per sub-tile shift,
write one feature, one logit, and one probability map per shift.

File naming deliberately encodes (tile id, shift x, shift y):

    {tile}.x{sx:03d}.y{sy:03d}.features.oods
    {tile}.x{sx:03d}.y{sy:03d}.logits.oods
    {tile}.x{sx:03d}.y{sy:03d}.probs.oods

plus a tab-separated ``export_manifest.txt`` over all rows and a ``job.txt``
key = value record of the run. Output files are independent of one another,
so tile batches could run in parallel; the stub path just chunks serially.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .models import resolve_model

MANIFEST_NAME = "export_manifest.txt"
_MANIFEST_COLUMNS = ("tile", "shift_x", "shift_y", "features", "logits", "probs")


@dataclass
class ExportJob:
    model: str
    tiles_dir: str
    out_dir: str
    geometry: wire.TileGeometry = field(default_factory=wire.TileGeometry)
    device: str = "cpu"
    batch_size: int = 8


@dataclass
class ExportResult:
    tiles: list          # tile ids, sorted
    files: list          # every tensor file written, manifest order
    manifest_path: str


def _softmax_f32(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=0, keepdims=True)).astype(np.float32)


def discover_tiles(tiles_dir: str) -> list:
    """(tile id, path) pairs for every regular non-hidden file, sorted by id.
    The id is the file name without its final extension."""
    try:
        names = sorted(os.listdir(tiles_dir))
    except FileNotFoundError:
        raise ValueError(f"no such tile directory: {tiles_dir!r}") from None
    found = []
    seen = {}
    for name in names:
        if name.startswith("."):
            continue
        path = os.path.join(tiles_dir, name)
        if not os.path.isfile(path):
            continue
        tile_id = os.path.splitext(name)[0]
        if tile_id in seen:
            raise ValueError(f"duplicate tile id {tile_id!r}: {seen[tile_id]} and {name}")
        seen[tile_id] = name
        found.append((tile_id, path))
    if not found:
        raise ValueError(f"no input tiles in {tiles_dir!r}")
    return found


def export(job: ExportJob) -> ExportResult:
    if job.batch_size < 1:
        raise ValueError("batch size must be positive")
    model = resolve_model(job.model)
    tiles = discover_tiles(job.tiles_dir)
    shifts = job.geometry.shifts()
    side = job.geometry.grid_side
    os.makedirs(job.out_dir, exist_ok=True)

    rows = []
    files = []
    for start in range(0, len(tiles), job.batch_size):
        for tile_id, path in tiles[start : start + job.batch_size]:
            with open(path, "rb") as f:
                tile_bytes = f.read()
            for sx, sy in shifts:
                features, logits = model.apply(tile_id, tile_bytes, (sx, sy), side)
                if features.shape != (model.dim, side, side) or features.dtype != np.float32:
                    raise ValueError(f"model emitted a bad feature map for tile {tile_id!r}")
                if logits.shape != (model.classes, side, side) or logits.dtype != np.float32:
                    raise ValueError(f"model emitted a bad logit map for tile {tile_id!r}")
                stem = f"{tile_id}.x{sx:03d}.y{sy:03d}"
                names = {
                    "features": (f"{stem}.features.oods", features, wire.KIND_FEATURE),
                    "logits": (f"{stem}.logits.oods", logits, wire.KIND_LOGIT),
                    "probs": (f"{stem}.probs.oods", _softmax_f32(logits), wire.KIND_PROB),
                }
                for fname, values, kind in names.values():
                    wire.write_f32(os.path.join(job.out_dir, fname), values, kind)
                    files.append(fname)
                rows.append(
                    (tile_id, str(sx), str(sy), names["features"][0], names["logits"][0], names["probs"][0])
                )

    manifest_path = os.path.join(job.out_dir, MANIFEST_NAME)
    with open(manifest_path, "w") as f:
        f.write("\t".join(_MANIFEST_COLUMNS) + "\n")
        for row in rows:
            f.write("\t".join(row) + "\n")

    job_record = {
        "model": model.describe(),
        "tiles_dir": job.tiles_dir,
        "tile": job.geometry.tile,
        "inner": job.geometry.inner,
        "stride": job.geometry.stride,
        "latent": job.geometry.latent,
        "device": job.device,
        "batch_size": job.batch_size,
        "n_tiles": len(tiles),
        "n_shifts": len(shifts),
    }
    with open(os.path.join(job.out_dir, "job.txt"), "w") as f:
        for key, value in job_record.items():
            f.write(f"{key} = {value}\n")

    return ExportResult(
        tiles=[tile_id for tile_id, _ in tiles],
        files=files,
        manifest_path=manifest_path,
    )
