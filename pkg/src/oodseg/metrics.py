"""Evaluation over the extended label set {healthy, anomaly_1..K, OOD}.

The confusion matrix is (K+2) x (K+2): row = true class, column = predicted
extended class, with healthy at index 0 and the out-of-distribution label at
index K+1. Anomaly detection is judged on healthy-vs-rest:

    TP_i = pixels of anomaly class i predicted as anything except healthy
    FN_i = pixels of anomaly class i predicted healthy
    FP   = healthy pixels predicted as anything except healthy
    TN   = healthy pixels predicted healthy

The averaged false negative rate fnr_bar = mean_i FN_i / (TP_i + FN_i) is
independent of class prevalence; fpr = FP / (FP + TN); the balanced error
rate is their arithmetic mean. All rates are percentages.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .labelspace import UNLABELED, ood_label


@dataclass
class ExtendedConfusion:
    """Integer pixel counts over the extended label set."""

    counts: np.ndarray  # (K+2, K+2) int64
    n_id_classes: int   # K+1 (healthy plus K anomaly classes)

    @property
    def n_anomaly_classes(self) -> int:
        return self.n_id_classes - 1

    @property
    def ood_index(self) -> int:
        return self.n_id_classes

    def __add__(self, other: "ExtendedConfusion") -> "ExtendedConfusion":
        if other.n_id_classes != self.n_id_classes:
            raise ValueError("cannot merge confusion matrices over different class sets")
        return ExtendedConfusion(self.counts + other.counts, self.n_id_classes)


def accumulate(
    true_labels: np.ndarray,
    predicted_extended: np.ndarray,
    n_id_classes: int,
    neutral_classes=(),
    into: ExtendedConfusion | None = None,
) -> ExtendedConfusion:
    """Count (true, predicted) pairs into an extended confusion matrix.

    UNLABELED pixels are skipped. Pixels whose true or predicted label is a
    neutral class (tissue-free background, vessels: in-distribution for
    segmentation but outside the anomaly positives/negatives) are dropped.
    Any other label outside the extended range is an error.
    """
    t = np.asarray(true_labels).ravel()
    p = np.asarray(predicted_extended).ravel()
    if t.shape != p.shape:
        raise ValueError("true and predicted labels must align")
    side = n_id_classes + 1  # + the out-of-distribution column

    keep = t != UNLABELED
    for c in neutral_classes:
        keep &= (t != c) & (p != c)
    t = t[keep]
    p = p[keep]
    if t.size:
        if t.min() < 0 or t.max() >= side:
            raise ValueError("unknown true label value outside the extended range")
        if p.min() < 0 or p.max() >= side:
            raise ValueError("unknown predicted label value outside the extended range")

    counts = np.bincount(t * side + p, minlength=side * side).reshape(side, side)
    result = ExtendedConfusion(counts.astype(np.int64), n_id_classes)
    if into is not None:
        result = into + result
    return result


def fnr_bar(cm: ExtendedConfusion) -> float:
    """Mean per-class false negative rate (%) over anomaly classes (known
    anomalies and the out-of-distribution row). Classes with no ground-truth
    pixels are excluded with a warning."""
    rates = []
    skipped = []
    for i in range(1, cm.ood_index + 1):
        row = cm.counts[i]
        total = int(row.sum())
        if total == 0:
            skipped.append(i)
            continue
        fn = int(row[0])
        rates.append(100.0 * fn / total)
    if skipped:
        warnings.warn(
            f"anomaly classes {skipped} have no ground-truth pixels and are excluded from fnr_bar",
            stacklevel=2,
        )
    if not rates:
        raise ValueError("no anomaly pixels at all: fnr_bar is undefined")
    # exactly-rounded sum: the mean is bitwise independent of row order, so
    # relabeling one anomaly class as another cannot move it
    return math.fsum(rates) / len(rates)


def fpr(cm: ExtendedConfusion) -> float:
    """Healthy pixels predicted non-healthy, as a percentage."""
    row = cm.counts[0]
    total = int(row.sum())
    if total == 0:
        raise ValueError("no healthy pixels: fpr is undefined")
    return float(100.0 * (total - int(row[0])) / total)


def ber(fnr_bar_pct: float, fpr_pct: float) -> float:
    """Balanced error rate: arithmetic mean of fnr_bar and fpr."""
    return (fnr_bar_pct + fpr_pct) / 2.0


@dataclass
class MetricReport:
    """Misclassification breakdown, all percentages.

    The healthy block splits the false positive rate by what the pixels were
    mistaken for; the known-anomaly block pools all known anomaly classes;
    the out-of-distribution block covers held-out classes. Within each block
    the parts sum to the block's total misclassification.
    """

    fnr_bar: float
    fpr: float
    ber: float
    healthy_as_id_anomaly: float
    healthy_as_ood: float
    id_misclassified: float
    id_as_other_id: float
    id_as_ood: float
    id_as_healthy: float
    ood_misclassified: float
    ood_as_id_anomaly: float
    ood_as_healthy: float

    FIELDS = (
        "fnr_bar",
        "fpr",
        "ber",
        "healthy_as_id_anomaly",
        "healthy_as_ood",
        "id_misclassified",
        "id_as_other_id",
        "id_as_ood",
        "id_as_healthy",
        "ood_misclassified",
        "ood_as_id_anomaly",
        "ood_as_healthy",
    )


def breakdown(cm: ExtendedConfusion) -> MetricReport:
    """Full misclassification breakdown of an extended confusion matrix."""
    k1 = cm.ood_index  # out-of-distribution row/column index
    c = cm.counts.astype(np.float64)

    healthy_total = c[0].sum()
    if healthy_total == 0:
        raise ValueError("no healthy pixels: breakdown is undefined")
    healthy_as_id = 100.0 * c[0, 1:k1].sum() / healthy_total
    healthy_as_ood = 100.0 * c[0, k1] / healthy_total

    id_rows = c[1:k1]
    id_total = id_rows.sum()
    if id_total > 0:
        id_correct = np.trace(c[1:k1, 1:k1])
        id_as_other = 100.0 * (c[1:k1, 1:k1].sum() - id_correct) / id_total
        id_as_ood = 100.0 * id_rows[:, k1].sum() / id_total
        id_as_healthy = 100.0 * id_rows[:, 0].sum() / id_total
    else:
        id_as_other = id_as_ood = id_as_healthy = 0.0

    ood_total = c[k1].sum()
    if ood_total > 0:
        ood_as_id = 100.0 * c[k1, 1:k1].sum() / ood_total
        ood_as_healthy = 100.0 * c[k1, 0] / ood_total
        ood_misclassified = 100.0 * (ood_total - c[k1, k1]) / ood_total
    else:
        ood_as_id = ood_as_healthy = ood_misclassified = 0.0

    f = fnr_bar(cm)
    fp = fpr(cm)
    return MetricReport(
        fnr_bar=f,
        fpr=fp,
        ber=ber(f, fp),
        healthy_as_id_anomaly=float(healthy_as_id),
        healthy_as_ood=float(healthy_as_ood),
        id_misclassified=float(id_as_other + id_as_ood + id_as_healthy),
        id_as_other_id=float(id_as_other),
        id_as_ood=float(id_as_ood),
        id_as_healthy=float(id_as_healthy),
        ood_misclassified=float(ood_misclassified),
        ood_as_id_anomaly=float(ood_as_id),
        ood_as_healthy=float(ood_as_healthy),
    )


def mean_iou(true_labels: np.ndarray, predicted: np.ndarray, n_classes: int | None = None) -> float:
    """Mean intersection-over-union across the classes present in the ground
    truth. UNLABELED pixels are skipped. In-distribution labels only."""
    t = np.asarray(true_labels).ravel()
    p = np.asarray(predicted).ravel()
    if t.shape != p.shape:
        raise ValueError("true and predicted labels must align")
    keep = t != UNLABELED
    t = t[keep]
    p = p[keep]
    if t.size == 0:
        raise ValueError("no labeled pixels: mean IoU is undefined")
    if n_classes is None:
        n_classes = int(max(t.max(), p.max())) + 1
    ious = []
    for c in range(n_classes):
        tc = t == c
        if not tc.any():
            continue
        pc = p == c
        inter = np.count_nonzero(tc & pc)
        union = np.count_nonzero(tc | pc)
        ious.append(inter / union)
    return float(sum(ious) / len(ious))


def aggregate_seeds(reports: list) -> dict:
    """Mean and standard error of every report field across seeds.

    Standard error uses the sample standard deviation (n-1 denominator).
    A single report yields zero standard errors, flagged via n_seeds == 1.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    n = len(reports)
    out: dict[str, tuple[float, float]] = {}
    for name in MetricReport.FIELDS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        mean = float(values.mean())
        se = 0.0 if n == 1 else float(values.std(ddof=1) / math.sqrt(n))
        out[name] = (mean, se)
    out["n_seeds"] = n
    return out


def report_csv(aggregated: dict) -> str:
    """CSV of an aggregate_seeds result: field, mean, standard error."""
    lines = ["metric,mean,stderr"]
    for name in MetricReport.FIELDS:
        mean, se = aggregated[name]
        lines.append(f"{name},{mean!r},{se!r}")
    lines.append(f"n_seeds,{aggregated['n_seeds']},")
    return "\n".join(lines) + "\n"


def format_report(report: MetricReport) -> str:
    """Human-readable breakdown, two decimal places, ordered by block."""
    rows = [
        ("anomaly fnr_bar", report.fnr_bar),
        ("healthy fpr", report.fpr),
        ("balanced error rate", report.ber),
        ("healthy -> known anomaly", report.healthy_as_id_anomaly),
        ("healthy -> out-of-distribution", report.healthy_as_ood),
        ("known anomaly misclassified", report.id_misclassified),
        ("known anomaly -> other known anomaly", report.id_as_other_id),
        ("known anomaly -> out-of-distribution", report.id_as_ood),
        ("known anomaly -> healthy", report.id_as_healthy),
        ("out-of-distribution misclassified", report.ood_misclassified),
        ("out-of-distribution -> known anomaly", report.ood_as_id_anomaly),
        ("out-of-distribution -> healthy", report.ood_as_healthy),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value:6.2f}%" for name, value in rows) + "\n"
