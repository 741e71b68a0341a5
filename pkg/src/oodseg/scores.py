"""Pixelwise out-of-distribution scores.

Every scorer follows one sign convention: lower score = more likely
out-of-distribution. Scores are compared against thresholds with strict
``score < tau`` semantics downstream.

Mahalanobis variants use the class-conditional Gaussian statistics from
``calib``. The plain variant takes the distance to the nearest class mean
on raw features; the modified variant takes the distance to the *predicted*
class mean on l2-normalized features.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import tensorio
from .calib import ClassStats, l2_normalize

METHODS = ("maha", "maha+", "msp", "maxlogit", "energy", "react", "klm")

_SIMPLEX_TOL = 1e-5


def _as_batch(x, width_name="d"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected (N, {width_name}) or ({width_name},), got shape {x.shape}")


def _maybe_scalar(values, squeeze):
    return float(values[0]) if squeeze else values


def _sq_mahalanobis(x: np.ndarray, mean: np.ndarray, precision: np.ndarray) -> np.ndarray:
    diff = x - mean
    return np.einsum("nd,de,ne->n", diff, precision, diff)


def maha_score(h, stats: ClassStats):
    """Negated Mahalanobis distance to the nearest class mean.

    s = -min_c sqrt((h - mu_c)^T P (h - mu_c)), always <= 0. When the stats
    were fitted on normalized features the input is normalized the same way.
    """
    x, squeeze = _as_batch(h)
    if x.shape[1] != stats.dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match stats dim {stats.dim}")
    if stats.normalized:
        x = l2_normalize(x)
    d2 = np.stack([_sq_mahalanobis(x, stats.means[c], stats.precision) for c in range(stats.n_classes)])
    s = -np.sqrt(np.maximum(d2.min(axis=0), 0.0))
    return _maybe_scalar(s, squeeze)


def maha_plus_score(h, predicted_class, stats: ClassStats):
    """Negated Mahalanobis distance to the predicted class mean, on
    l2-normalized features. Requires stats fitted with normalize=True."""
    if not stats.normalized:
        raise ValueError("modified Mahalanobis score needs stats fitted on l2-normalized features")
    x, squeeze = _as_batch(h)
    if x.shape[1] != stats.dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match stats dim {stats.dim}")
    pred = np.atleast_1d(np.asarray(predicted_class, dtype=np.int64))
    if pred.shape != (x.shape[0],):
        raise ValueError("predicted_class must align with features")
    if pred.min() < 0 or pred.max() >= stats.n_classes:
        raise ValueError(f"predicted class out of range 0..{stats.n_classes - 1}")
    x = l2_normalize(x)
    diff = x - stats.means[pred]
    d2 = np.einsum("nd,de,ne->n", diff, stats.precision, diff)
    s = -np.sqrt(np.maximum(d2, 0.0))
    return _maybe_scalar(s, squeeze)


def msp_score(probs):
    """Maximum softmax probability. Input rows must lie on the simplex."""
    p, squeeze = _as_batch(probs, "C")
    if np.any(p < -_SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > _SIMPLEX_TOL):
        raise ValueError("probabilities do not lie on the simplex")
    return _maybe_scalar(p.max(axis=1), squeeze)


def maxlogit_score(logits):
    """Largest raw logit."""
    z, squeeze = _as_batch(logits, "C")
    return _maybe_scalar(z.max(axis=1), squeeze)


def energy_score(logits):
    """log-sum-exp of the logits, computed with max subtraction."""
    z, squeeze = _as_batch(logits, "C")
    return _maybe_scalar(logsumexp(z, axis=1), squeeze)


@dataclass
class ReactClamp:
    """Activation clamp for rectified energy scoring: features are clipped
    elementwise at ``threshold`` before the head is applied. The threshold
    is a percentile of all calibration activations."""

    threshold: float
    percentile: float = 90.0

    def __post_init__(self):
        if not 0.0 < self.percentile <= 100.0:
            raise ValueError("percentile must lie in (0, 100]")


def fit_react_clamp(features: np.ndarray, percentile: float = 90.0) -> ReactClamp:
    """Clamp threshold = the given percentile over every activation value in
    the calibration features."""
    if not 0.0 < percentile <= 100.0:
        raise ValueError("percentile must lie in (0, 100]")
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        raise ValueError("cannot fit a clamp on empty features")
    return ReactClamp(threshold=float(np.percentile(features, percentile)), percentile=percentile)


def react_score(h, head, clamp: ReactClamp):
    """Energy score of the head applied to clamped features:
    logsumexp(W min(h, c) + b)."""
    if clamp is None or clamp.threshold is None or np.isnan(clamp.threshold):
        raise ValueError("uncalibrated clamp: fit_react_clamp first")
    x, squeeze = _as_batch(h)
    clipped = np.minimum(x, clamp.threshold)
    logits = clipped @ head.weights.T + head.bias
    return _maybe_scalar(logsumexp(logits, axis=1), squeeze)


@dataclass
class KLProfiles:
    """Per-class mean probability vectors, floored at eps and renormalized."""

    profiles: np.ndarray  # (C, C) float64, rows sum to 1
    eps: float = 1e-12

    def __post_init__(self):
        if not np.allclose(self.profiles.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("profiles must sum to 1")


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    q = np.maximum(p, eps)
    return q / q.sum(axis=-1, keepdims=True)


def fit_kl_profiles(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-12) -> KLProfiles:
    """Mean probability vector per class, taken over calibration pixels
    grouped by their annotated (true) class."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("probs must be (N, C) with aligned labels")
    n_classes = probs.shape[1]
    keep = (labels >= 0) & (labels < n_classes)
    profiles = np.zeros((n_classes, n_classes))
    for c in range(n_classes):
        rows = probs[keep & (labels == c)]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} has no calibration pixels for a distribution profile")
        profiles[c] = rows.mean(axis=0)
    return KLProfiles(profiles=_smooth(profiles, eps), eps=eps)


def kl_matching_score(probs, profiles: KLProfiles):
    """Negated KL divergence (nats) to the closest class profile:
    s = -min_c KL(p || profile_c)."""
    p, squeeze = _as_batch(probs, "C")
    if p.shape[1] != profiles.profiles.shape[1]:
        raise ValueError("probability width does not match profiles")
    p = _smooth(p, profiles.eps)
    logp = np.log(p)
    logq = np.log(profiles.profiles)
    # KL(p || q_c) for every class c at once
    kl = np.einsum("nj,nj->n", p, logp)[:, None] - p @ logq.T
    return _maybe_scalar(-kl.min(axis=1), squeeze)


def save_score_map(path, scores: np.ndarray, method: str) -> None:
    """Score map + sidecar naming the method that produced it."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    tensorio.write_tensor(path, scores.astype(np.float32), kind="score")
    tensorio.write_sidecar(os.fspath(path) + ".txt", {"method": method})


def load_score_map(path):
    tf = tensorio.read_tensor(path)
    side = tensorio.read_sidecar(os.fspath(path) + ".txt")
    return tf.values, side["method"]
