"""Pixelwise out-of-distribution anomaly detection for tiled feature maps.

Post-hoc: a frozen encoder produces per-pixel features, a linear head
segments the known classes, class-conditional Gaussian statistics score
every pixel, and per-class (or global) score thresholds flag pixels whose
score falls below the cutoff as out-of-distribution.
"""

from .calib import ClassStats, estimate, l2_normalize
from .head import LinearHead, TrainConfig, class_weights, infer, train
from .labelspace import UNLABELED, ood_label
from .metrics import ExtendedConfusion, MetricReport, accumulate, ber, breakdown, fnr_bar, fpr, mean_iou
from .scores import (
    KLProfiles,
    ReactClamp,
    energy_score,
    fit_kl_profiles,
    fit_react_clamp,
    kl_matching_score,
    maha_plus_score,
    maha_score,
    maxlogit_score,
    msp_score,
    react_score,
)
from .splitter import SplitUnit, stratified_split, w1_histograms
from .synthgen import SynthDataset, SynthSpec, generate, heterogeneous_instance
from .tensorio import TensorFile, read_tensor, write_tensor
from .thresholds import SWEEP_GRID, ThresholdSet, decide, empirical_quantile, fit, sweep
from .tiles import CropRules, ShiftConfig, average_features, average_probs, enumerate_shifts

__version__ = "0.1.0"
