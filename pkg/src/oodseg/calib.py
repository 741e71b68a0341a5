"""Class-conditional Gaussian calibration.

Fits one mean per in-distribution class and a single covariance matrix
pooled over all classes:

    mu_c  = (1/N_c) sum_{y_k = c} h_k
    Sigma = (1/N)   sum_c sum_{y_k = c} (h_k - mu_c)(h_k - mu_c)^T

Note the 1/N normalization (not 1/(N - C)). The precision matrix is the
inverse of Sigma + lambda*I with a small trace-scaled ridge; inversion goes
through a symmetric positive-definite factorization and falls back to
eigenvalue clipping if that fails. All accumulation is float64.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import tensorio

# ridge: lam = RIDGE_SCALE * trace(Sigma)/d, floored so that an all-identical
# sample set (zero scatter) still yields an invertible matrix
RIDGE_SCALE = 1e-6
RIDGE_FLOOR = 1e-12

_SYM_TOL = 1e-10


@dataclass
class ClassStats:
    """Fitted calibration statistics.

    means      (C, d) float64, one row per in-distribution class
    cov        (d, d) float64, pooled covariance (unregularized)
    precision  (d, d) float64, inverse of cov + lam*I
    counts     (C,) int64, samples per class
    normalized bool, True when inputs were l2-normalized before fitting
    lam        float, the ridge actually applied
    """

    means: np.ndarray
    cov: np.ndarray
    precision: np.ndarray
    counts: np.ndarray
    normalized: bool
    lam: float

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        if self.means.ndim != 2:
            raise ValueError("means must be (C, d)")
        for name, m in (("cov", self.cov), ("precision", self.precision)):
            if m.shape != (self.dim, self.dim):
                raise ValueError(f"{name} must be ({self.dim}, {self.dim})")
            if not np.allclose(m, m.T, atol=_SYM_TOL, rtol=0):
                raise ValueError(f"{name} is not symmetric")
        if self.counts.shape != (self.n_classes,):
            raise ValueError("counts must have one entry per class")
        if self.lam < 0:
            raise ValueError("ridge must be non-negative")
        if self.normalized:
            norms = np.linalg.norm(self.means, axis=1)
            if np.any(norms > 1.0 + 1e-9):
                raise ValueError("normalized stats but mean norms exceed 1")


def l2_normalize(h: np.ndarray) -> np.ndarray:
    """Scale feature vectors to unit Euclidean norm.

    Accepts a single vector (d,) or a batch (N, d); a zero vector has no
    direction and raises.
    """
    h = np.asarray(h, dtype=np.float64)
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("degenerate feature: zero vector cannot be l2-normalized")
    return h / norms


def _invert_spd(a: np.ndarray, lam: float) -> np.ndarray:
    """Invert a symmetric matrix that should be positive definite. Cholesky
    first; on failure, clip eigenvalues at lam and invert the clipped form."""
    d = a.shape[0]
    try:
        c, low = scipy.linalg.cho_factor(a, lower=True)
        inv = scipy.linalg.cho_solve((c, low), np.eye(d))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        w, v = np.linalg.eigh((a + a.T) / 2.0)
        w = np.maximum(w, lam if lam > 0 else RIDGE_FLOOR)
        inv = (v / w) @ v.T
    return (inv + inv.T) / 2.0


def estimate(
    features: np.ndarray,
    labels: np.ndarray,
    normalize: bool = False,
    n_classes: int | None = None,
) -> ClassStats:
    """Fit per-class means and the pooled covariance.

    features : (N, d) array
    labels   : (N,) integer array; UNLABELED and any label >= n_classes
               (out-of-distribution ground truth) are excluded
    normalize: l2-normalize features before fitting
    n_classes: number of in-distribution classes; inferred from the labels
               when omitted

    Every class 0..n_classes-1 must contribute at least 2 samples.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2:
        raise ValueError("features must be (N, d)")
    if labels.shape != (features.shape[0],):
        raise ValueError("labels must align with features")

    keep = labels >= 0
    if n_classes is None:
        if not np.any(keep):
            raise ValueError("no labeled in-distribution samples")
        n_classes = int(labels[keep].max()) + 1
    keep &= labels < n_classes
    x = features[keep]
    y = labels[keep].astype(np.int64)

    if normalize:
        x = l2_normalize(x)

    d = x.shape[1]
    counts = np.bincount(y, minlength=n_classes).astype(np.int64)
    for c in range(n_classes):
        if counts[c] < 2:
            raise ValueError(f"class {c} has < 2 samples ({counts[c]}); cannot calibrate")

    means = np.zeros((n_classes, d))
    scatter = np.zeros((d, d))
    # accumulate per class in ascending class order so results do not depend
    # on how the caller interleaved the classes
    for c in range(n_classes):
        xc = x[y == c]
        means[c] = xc.sum(axis=0) / counts[c]
        centered = xc - means[c]
        scatter += centered.T @ centered
    n_total = int(counts.sum())
    cov = scatter / n_total
    cov = (cov + cov.T) / 2.0

    lam = max(RIDGE_SCALE * float(np.trace(cov)) / d, RIDGE_FLOOR)
    precision = _invert_spd(cov + lam * np.eye(d), lam)

    stats = ClassStats(
        means=means,
        cov=cov,
        precision=precision,
        counts=counts,
        normalized=normalize,
        lam=lam,
    )
    stats.validate()
    return stats


def save_stats(stats: ClassStats, prefix) -> None:
    """Write stats as three float64 tensor files plus a plain-text sidecar."""
    prefix = os.fspath(prefix)
    tensorio.write_tensor(prefix + ".means.oods", stats.means.astype(np.float64), kind="stats")
    tensorio.write_tensor(prefix + ".cov.oods", stats.cov.astype(np.float64), kind="stats")
    tensorio.write_tensor(prefix + ".precision.oods", stats.precision.astype(np.float64), kind="stats")
    tensorio.write_sidecar(
        prefix + ".stats.txt",
        {
            "lam": float(stats.lam),
            "normalized": stats.normalized,
            "counts": ",".join(str(int(c)) for c in stats.counts),
        },
    )


def load_stats(prefix) -> ClassStats:
    prefix = os.fspath(prefix)
    means = tensorio.read_tensor(prefix + ".means.oods").values
    cov = tensorio.read_tensor(prefix + ".cov.oods").values
    precision = tensorio.read_tensor(prefix + ".precision.oods").values
    side = tensorio.read_sidecar(prefix + ".stats.txt")
    stats = ClassStats(
        means=means,
        cov=cov,
        precision=precision,
        counts=np.array([int(c) for c in side["counts"].split(",")], dtype=np.int64),
        normalized=side["normalized"] == "True",
        lam=float(side["lam"]),
    )
    stats.validate()
    return stats
