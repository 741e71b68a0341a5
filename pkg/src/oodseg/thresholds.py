"""Score thresholds: one global cutoff, or one cutoff per predicted class.

A threshold tau is the empirical lower quantile of calibration scores at
level q = 1 - p, where p is the fraction of calibration pixels that must
stay in-distribution. The decision rule is strict: score < tau flags the
pixel as out-of-distribution, score == tau keeps it.

The quantile is a plain order statistic, no interpolation: with n sorted
scores, tau = the (floor(q*n) + 1)-th smallest. That choice makes the
acceptance guarantee exact for tie-free scores:

    p <= (kept fraction) < p + 1/n

q = 0 yields tau = -inf (nothing is ever flagged).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .labelspace import ood_label

MODES = ("standard", "adaptive")

# p-grid for the operating-point sweep: 25 values, 0.950 .. 0.998 step 0.002
SWEEP_GRID = tuple(round(0.950 + 0.002 * i, 3) for i in range(25))


def empirical_quantile(scores: np.ndarray, q: float) -> float:
    """Lower empirical quantile as an order statistic (see module docstring)."""
    if not 0.0 <= q < 1.0:
        raise ValueError("q must lie in [0, 1)")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.size
    if n == 0:
        raise ValueError("empty score set")
    if q == 0.0:
        return float("-inf")
    rank = math.floor(q * n) + 1  # 1-indexed
    if rank > n:
        rank = n
    return float(np.sort(scores)[rank - 1])


@dataclass
class ThresholdSet:
    """Fitted cutoffs. ``taus`` has one entry per in-distribution class in
    adaptive mode and a single entry broadcast to every class in standard
    mode. ``population`` records what the thresholds were fitted on."""

    mode: str
    p: float
    taus: np.ndarray
    n_classes: int
    population: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        self.taus = np.asarray(self.taus, dtype=np.float64)
        if self.taus.shape != (self.n_classes,):
            raise ValueError("need one tau per in-distribution class")

    def tau_for(self, predicted_class: int) -> float:
        return float(self.taus[predicted_class])


def fit(
    scores: np.ndarray,
    predicted: np.ndarray,
    mode: str,
    p: float,
    n_classes: int,
    allow_global_fallback: bool = False,
    population: str = "",
) -> ThresholdSet:
    """Fit thresholds on calibration scores.

    standard: one global quantile over all scores, applied to every class.
    adaptive: per class c, the quantile of scores whose *predicted* class
    is c. A class nobody was predicted as has no score population; that is
    an error unless allow_global_fallback is set, in which case the global
    tau stands in (with a warning).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    predicted = np.asarray(predicted).ravel()
    if predicted.shape != scores.shape:
        raise ValueError("predicted classes must align with scores")
    q = 1.0 - p

    if mode == "standard":
        tau = empirical_quantile(scores, q)
        taus = np.full(n_classes, tau)
    else:
        taus = np.empty(n_classes)
        global_tau = None
        for c in range(n_classes):
            cls_scores = scores[predicted == c]
            if cls_scores.size == 0:
                if not allow_global_fallback:
                    raise ValueError(
                        f"adaptive thresholds: class {c} has zero predicted pixels in calibration"
                    )
                if global_tau is None:
                    global_tau = empirical_quantile(scores, q)
                warnings.warn(
                    f"class {c} has zero predicted calibration pixels; using the global threshold",
                    stacklevel=2,
                )
                taus[c] = global_tau
            else:
                taus[c] = empirical_quantile(cls_scores, q)

    return ThresholdSet(mode=mode, p=p, taus=taus, n_classes=n_classes, population=population)


def decide(scores: np.ndarray, predicted: np.ndarray, thresholds: ThresholdSet) -> np.ndarray:
    """Extended labels: the predicted class, or the out-of-distribution label
    when score < tau(predicted class). Works on any common shape."""
    scores = np.asarray(scores, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if predicted.shape != scores.shape:
        raise ValueError("predicted classes must align with scores")
    if predicted.size and (predicted.min() < 0 or predicted.max() >= thresholds.n_classes):
        raise ValueError("predicted class out of range")
    taus = thresholds.taus[predicted]
    return np.where(scores < taus, ood_label(thresholds.n_classes), predicted)


@dataclass
class SweepResult:
    """Outcome of an operating-point sweep over the p-grid."""

    rows: list  # (p, fnr_bar, fpr, ber) per grid point, grid order
    best_p: float
    best_index: int

    def as_csv(self, method: str = "", mode: str = "") -> str:
        lines = ["p,method,mode,fnr_bar,fpr,ber"]
        for p, fnr, fpr_, ber_ in self.rows:
            lines.append(f"{p!r},{method},{mode},{fnr!r},{fpr_!r},{ber_!r}")
        return "\n".join(lines) + "\n"


def sweep(
    calib_scores: np.ndarray,
    calib_predicted: np.ndarray,
    eval_scores: np.ndarray,
    eval_predicted: np.ndarray,
    eval_true: np.ndarray,
    mode: str,
    n_classes: int,
    grid=SWEEP_GRID,
    allow_global_fallback: bool = False,
) -> SweepResult:
    """Fit thresholds at every p on the grid, evaluate the balanced error
    rate on the evaluation set, and return the full table plus the best p
    (lowest BER; ties go to the smallest p)."""
    from . import metrics  # local import: metrics does not depend on thresholds

    rows = []
    for p in grid:
        ts = fit(
            calib_scores,
            calib_predicted,
            mode,
            p,
            n_classes,
            allow_global_fallback=allow_global_fallback,
        )
        extended = decide(eval_scores, eval_predicted, ts)
        cm = metrics.accumulate(eval_true, extended, n_classes)
        fnr = metrics.fnr_bar(cm)
        fpr_ = metrics.fpr(cm)
        rows.append((p, fnr, fpr_, metrics.ber(fnr, fpr_)))

    best_index = min(range(len(rows)), key=lambda i: (rows[i][3], rows[i][0]))
    return SweepResult(rows=rows, best_p=rows[best_index][0], best_index=best_index)


def save_thresholds(path, thresholds: ThresholdSet) -> None:
    entries = {
        "mode": thresholds.mode,
        "p": float(thresholds.p),
        "n_classes": thresholds.n_classes,
        "population": thresholds.population,
    }
    for c in range(thresholds.n_classes):
        entries[f"tau[{c}]"] = float(thresholds.taus[c])
    tensorio.write_sidecar(path, entries)


def load_thresholds(path) -> ThresholdSet:
    side = tensorio.read_sidecar(path)
    n_classes = int(side["n_classes"])
    taus = np.array([float(side[f"tau[{c}]"]) for c in range(n_classes)])
    return ThresholdSet(
        mode=side["mode"],
        p=float(side["p"]),
        taus=taus,
        n_classes=n_classes,
        population=side.get("population", ""),
    )
