"""Shared label conventions.

In-distribution classes are 0..C-1 with class 0 = healthy/background tissue
and classes 1..C-1 the known anomaly kinds. Two sentinels sit outside that
range:

* UNLABELED (-1): pixel has no annotation. Skipped by calibration, training
  and every metric.
* the out-of-distribution label, ``ood_label(C) == C``: used as evaluation
  ground truth for held-out classes and as the extended prediction emitted
  when a pixel's score falls below its threshold. Never a calibration input.
"""

UNLABELED = -1


def ood_label(n_id_classes: int) -> int:
    """Extended-label index that flags a pixel as out-of-distribution."""
    if n_id_classes < 1:
        raise ValueError("need at least one in-distribution class")
    return n_id_classes
