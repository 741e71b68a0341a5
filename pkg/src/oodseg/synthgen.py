"""Synthetic tiled datasets with a known in/out-of-distribution split.

Each in-distribution class is an isotropic Gaussian blob in feature space
(optionally a two-component mixture); held-out classes are placed at the
same radius but in their own directions, so they stay separated from every
in-distribution class even after l2 normalization. Class means are pairwise
at least ``separation * max(spread)`` apart.

Pixels are packed into square latent tiles; the trailing remainder of the
last tile is padded with UNLABELED pixels (features repeat earlier pixels
so they stay usable downstream, e.g. normalizable).

Everything is driven by one seeded generator: the same spec and seed
reproduce the same dataset bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .labelspace import UNLABELED, ood_label

MANIFEST_NAME = "manifest.txt"
_MANIFEST_COLUMNS = ("tile", "split", "shift_x", "shift_y", "features", "labels", "composition")


@dataclass
class SynthSpec:
    dim: int = 16
    n_anomalies: int = 4          # known anomaly classes; healthy is class 0
    n_ood_classes: int = 1        # held-out classes, test split only
    separation: float = 6.0       # min mean distance in units of the largest spread
    samples_per_class: int = 1000    # training pixels per in-distribution class
    val_fraction: float = 0.25       # validation pixels per class, relative to training
    test_samples_per_class: int | None = None  # defaults to samples_per_class
    ood_samples: int | None = None             # defaults to samples_per_class
    spreads: tuple | None = None  # per in-distribution class; default all 1.0
    ood_spread: float = 1.0
    mixture_offsets: dict = field(default_factory=dict)  # class -> lobe offset (x spread units)
    tile_side: int = 32           # latent tile side
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("need dim >= 2")
        if self.n_anomalies < 1:
            raise ValueError("need at least one known anomaly class")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.samples_per_class < self.dim + 2:
            raise ValueError(
                f"insufficient samples: need at least dim + 2 = {self.dim + 2} training "
                f"pixels per calibrated class, got {self.samples_per_class}"
            )
        if self.spreads is not None and len(self.spreads) != self.n_id_classes:
            raise ValueError("spreads must list one multiplier per in-distribution class")

    @property
    def n_id_classes(self) -> int:
        return 1 + self.n_anomalies

    @property
    def ood_truth_label(self) -> int:
        return ood_label(self.n_id_classes)


@dataclass
class SynthDataset:
    spec: SynthSpec
    class_means: np.ndarray   # (n_id + n_ood, d): configured means, OOD rows last
    class_spreads: np.ndarray
    splits: dict              # split -> list of (features (d, g, g) f32, labels (g, g) i32)

    @property
    def n_id_classes(self) -> int:
        return self.spec.n_id_classes

    @property
    def ood_truth_label(self) -> int:
        return self.spec.ood_truth_label

    def pixels(self, *split_names):
        """Flatten the named splits to an (N, d) feature matrix and (N,)
        labels, tile order then row-major. Padding pixels carry UNLABELED."""
        feats, labs = [], []
        for name in split_names:
            for fm, lm in self.splits[name]:
                d = fm.shape[0]
                feats.append(fm.reshape(d, -1).T)
                labs.append(lm.reshape(-1))
        return (
            np.concatenate(feats).astype(np.float64),
            np.concatenate(labs).astype(np.int64),
        )


def _separated_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Unit directions with pairwise distance bounded away from zero."""
    for _ in range(64):
        dirs = rng.standard_normal((n, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        gaps = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() > 0.1:
            return dirs
    raise ValueError(f"could not place {n} separated directions in {dim} dimensions")


def _sample_class(rng, mean, spread, n, dim, lobe_offset, lobe_dir):
    x = mean + spread * rng.standard_normal((n, dim))
    if lobe_offset:
        signs = rng.integers(0, 2, size=n) * 2 - 1
        x += (signs * lobe_offset * spread)[:, None] * lobe_dir
    return x


def _pack_tiles(features, labels, side, dim):
    per_tile = side * side
    n = features.shape[0]
    n_tiles = -(-n // per_tile)
    pad = n_tiles * per_tile - n
    if pad:
        # wrap from the start, repeating as often as needed when the split is
        # smaller than a single tile
        features = np.concatenate([features, features[np.arange(pad) % n]])
        labels = np.concatenate([labels, np.full(pad, UNLABELED, dtype=labels.dtype)])
    tiles = []
    for i in range(n_tiles):
        block = slice(i * per_tile, (i + 1) * per_tile)
        fm = features[block].T.reshape(dim, side, side).astype(np.float32)
        lm = labels[block].reshape(side, side).astype(np.int32)
        tiles.append((fm, lm))
    return tiles


def generate(spec: SynthSpec) -> SynthDataset:
    """Draw the dataset described by ``spec``: train and val splits with the
    in-distribution classes, a test split that adds the held-out classes."""
    rng = np.random.default_rng(spec.seed)
    dim = spec.dim
    n_id = spec.n_id_classes
    n_total = n_id + spec.n_ood_classes

    spreads = np.ones(n_total)
    if spec.spreads is not None:
        spreads[:n_id] = spec.spreads
    spreads[n_id:] = spec.ood_spread

    dirs = _separated_directions(rng, n_total, dim)
    gaps = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=-1)
    np.fill_diagonal(gaps, np.inf)
    radius = spec.separation * float(spreads.max()) / float(gaps.min())
    means = radius * dirs

    # one tangential lobe direction per mixture class, orthogonal to its mean
    lobe_dirs = {}
    for c in spec.mixture_offsets:
        v = rng.standard_normal(dim)
        mu_hat = dirs[c]
        v -= (v @ mu_hat) * mu_hat
        lobe_dirs[c] = v / np.linalg.norm(v)

    n_test = spec.test_samples_per_class or spec.samples_per_class
    n_ood = spec.ood_samples or spec.samples_per_class
    n_val = max(2, int(round(spec.val_fraction * spec.samples_per_class)))
    split_counts = {
        "train": {c: spec.samples_per_class for c in range(n_id)},
        "val": {c: n_val for c in range(n_id)},
        "test": {c: n_test for c in range(n_id)},
    }
    for c in range(n_id, n_total):
        split_counts["test"][c] = n_ood

    splits = {}
    for split, counts in split_counts.items():
        feats, labs = [], []
        for c, n in counts.items():
            x = _sample_class(
                rng, means[c], spreads[c], n, dim,
                spec.mixture_offsets.get(c, 0.0), lobe_dirs.get(c),
            )
            feats.append(x)
            label = c if c < n_id else spec.ood_truth_label
            labs.append(np.full(n, label, dtype=np.int64))
        features = np.concatenate(feats)
        labels = np.concatenate(labs)
        perm = rng.permutation(features.shape[0])
        splits[split] = _pack_tiles(features[perm], labels[perm], spec.tile_side, dim)

    return SynthDataset(spec=spec, class_means=means, class_spreads=spreads, splits=splits)


def heterogeneous_instance(
    seed: int,
    spreads: tuple = (1.0, 0.35, 2.6),
    mixture_offset: float = 2.5,
    counts: tuple = (9000, 3000, 900),
    dim: int = 8,
    separation: float = 6.0,
    min_iqr_ratio: float = 3.0,
) -> SynthDataset:
    """Instance whose classes have materially different score spreads: a
    dominant healthy class, a tight anomaly, and a rare wide two-component
    anomaly, plus one held-out class.

    The construction is self-checked: per-class distance-score interquartile
    ranges (distance to the own class mean under the pooled covariance) must
    differ by at least ``min_iqr_ratio``, otherwise the instance is rejected
    with a diagnostic.
    """
    from . import calib, scores  # deferred: only the self-check needs them

    if len(spreads) != 3 or len(counts) != 3:
        raise ValueError("expected spreads and counts for healthy + two anomaly classes")
    spec = SynthSpec(
        dim=dim,
        n_anomalies=2,
        n_ood_classes=1,
        separation=separation,
        samples_per_class=max(counts),
        spreads=spreads,
        mixture_offsets={2: mixture_offset} if mixture_offset else {},
        seed=seed,
    )
    ds = generate(spec)
    ds = _thin_to_counts(ds, dict(enumerate(counts)))

    x, y = ds.pixels("train")
    keep = y != UNLABELED
    stats = calib.estimate(x[keep], y[keep], normalize=True, n_classes=spec.n_id_classes)
    iqrs = []
    for c in range(spec.n_id_classes):
        xc = x[keep][y[keep] == c]
        s = scores.maha_plus_score(xc, np.full(len(xc), c), stats)
        q1, q3 = np.percentile(s, [25, 75])
        iqrs.append(q3 - q1)
    ratio = max(iqrs) / min(iqrs)
    if ratio < min_iqr_ratio:
        raise ValueError(
            f"homogeneous score spreads: per-class IQR ratio {ratio:.2f} < {min_iqr_ratio}; "
            "increase the spread contrast or the mixture offset"
        )
    return ds


def _thin_to_counts(ds: SynthDataset, id_counts: dict) -> SynthDataset:
    """Keep only the first ``id_counts[c]`` pixels of each in-distribution
    class per split (scaled for val), relabeling the rest UNLABELED, then
    repack. Keeps generation single-pass while allowing unequal classes."""
    spec = ds.spec
    new_splits = {}
    for split, tiles in ds.splits.items():
        feats = np.concatenate([fm.reshape(fm.shape[0], -1).T for fm, _ in tiles])
        labs = np.concatenate([lm.reshape(-1) for _, lm in tiles])
        scale = spec.val_fraction if split == "val" else 1.0
        keep = np.zeros(len(labs), dtype=bool)
        for c in np.unique(labs):
            idx = np.flatnonzero(labs == c)
            if c in id_counts:
                limit = max(2, int(round(id_counts[int(c)] * scale)))
                idx = idx[:limit]
            elif c == UNLABELED:
                idx = idx[:0]
            keep[idx] = True
        new_splits[split] = _pack_tiles(
            feats[keep], labs[keep].astype(np.int64), spec.tile_side, spec.dim
        )
    return SynthDataset(
        spec=spec, class_means=ds.class_means, class_spreads=ds.class_spreads, splits=new_splits
    )


def _composition(labels: np.ndarray) -> str:
    values, counts = np.unique(labels, return_counts=True)
    return ",".join(f"{int(v)}:{int(n)}" for v, n in zip(values, counts))


def save_dataset(ds: SynthDataset, out_dir) -> None:
    """Write every tile as a pair of tensor files plus a manifest listing
    file, split, and class composition."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for split, tiles in ds.splits.items():
        for i, (fm, lm) in enumerate(tiles):
            tile_id = f"{split}_{i:04d}"
            feat_name = f"{tile_id}.features.oods"
            lab_name = f"{tile_id}.labels.oods"
            tensorio.write_tensor(os.path.join(out_dir, feat_name), fm, kind="feature")
            tensorio.write_tensor(os.path.join(out_dir, lab_name), lm, kind="label")
            rows.append((tile_id, split, "-", "-", feat_name, lab_name, _composition(lm)))
    write_manifest(os.path.join(out_dir, MANIFEST_NAME), rows)


def write_manifest(path, rows) -> None:
    lines = ["\t".join(_MANIFEST_COLUMNS)]
    for row in rows:
        if len(row) != len(_MANIFEST_COLUMNS):
            raise ValueError("manifest rows need exactly the documented columns")
        lines.append("\t".join(str(v) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path) -> list[dict]:
    """Parse a dataset manifest into one dict per row."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != _MANIFEST_COLUMNS:
        raise ValueError("not a dataset manifest")
    rows = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != len(_MANIFEST_COLUMNS):
            raise ValueError(f"malformed manifest row: {ln!r}")
        rows.append(dict(zip(_MANIFEST_COLUMNS, parts)))
    return rows
