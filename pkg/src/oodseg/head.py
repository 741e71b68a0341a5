"""Linear segmentation head over frozen per-pixel features.

logits = W h + b, trained with class-weighted cross entropy by mini-batch
gradient descent. The learning rate halves when validation loss has not
improved for `patience` consecutive epochs, and the returned parameters are
the snapshot with the best validation mean IoU.

Training is deterministic for a given seed and invariant to the order of
the input pixels: pixels are brought into a canonical order before the
seeded shuffle, so feeding a permutation of the same data reproduces the
same parameters bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import tensorio
from .labelspace import UNLABELED
from .metrics import mean_iou

WEIGHT_MODES = ("inverse_frequency", "uniform")


@dataclass
class LinearHead:
    weights: np.ndarray  # (C, d) float64
    bias: np.ndarray     # (C,) float64

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (C, d) with a (C,) bias")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 3e-4
    batch_size: int | None = None  # None = full batch
    lr_decay: float = 0.5
    patience: int = 2
    seed: int = 0
    weight_mode: str = "inverse_frequency"
    val_fraction: float = 0.2  # used only when no validation set is passed

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")


def class_weights(label_counts) -> np.ndarray:
    """Inverse-frequency class weights, normalized to mean 1.

    counts [90, 10] -> weights [0.2, 1.8].
    """
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("label_counts must be a non-empty vector")
    if np.any(counts <= 0):
        raise ValueError("zero-count class: every class needs at least one labeled pixel")
    raw = 1.0 / counts
    return raw / raw.mean()


def loss_and_grad(weights, bias, x, y, sample_class_weights):
    """Weighted cross entropy and its analytic gradient.

    L = sum_k w_{y_k} * (-log p_{y_k}(x_k)) / sum_k w_{y_k}
    """
    z = x @ weights.T + bias
    logz = logsumexp(z, axis=1, keepdims=True)
    logp = z - logz
    w = sample_class_weights[y]
    wsum = w.sum()
    loss = float(-(w * logp[np.arange(len(y)), y]).sum() / wsum)
    delta = np.exp(logp)
    delta[np.arange(len(y)), y] -= 1.0
    delta *= (w / wsum)[:, None]
    return loss, delta.T @ x, delta.sum(axis=0)


def _canonical_order(x, y):
    # total order over (label, feature columns): any permutation of the same
    # pixel set sorts to the same sequence
    keys = tuple(x[:, j] for j in range(x.shape[1] - 1, -1, -1)) + (y,)
    return np.lexsort(keys)


def predict_logits(head: LinearHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ head.weights.T + head.bias


def _softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(z - logsumexp(z, axis=-1, keepdims=True))


def infer(head: LinearHead, feature_map: np.ndarray):
    """Apply the head to a (d, H, W) feature map or an (N, d) pixel batch.

    Returns (logits, probabilities) in the matching layout: (C, H, W) maps
    or (N, C) batches. Probability rows sum to 1 within 1e-6; the argmax of
    the probabilities equals the argmax of the logits.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim == 3:
        d, h, w = fm.shape
        if d != head.dim:
            raise ValueError(f"feature dim {d} does not match head dim {head.dim}")
        flat = fm.reshape(d, h * w).T
        logits = predict_logits(head, flat)
        probs = _softmax(logits)
        c = head.n_classes
        return logits.T.reshape(c, h, w), probs.T.reshape(c, h, w)
    if fm.ndim == 2:
        if fm.shape[1] != head.dim:
            raise ValueError(f"feature dim {fm.shape[1]} does not match head dim {head.dim}")
        logits = predict_logits(head, fm)
        return logits, _softmax(logits)
    raise ValueError("feature_map must be (d, H, W) or (N, d)")


@dataclass
class TrainResult:
    head: LinearHead
    history: list          # per-epoch dicts: loss, val_loss, val_miou, lr
    best_epoch: int
    class_weights: np.ndarray


def train(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    val_features: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
) -> TrainResult:
    """Train the head on (N, d) features with (N,) integer labels.

    UNLABELED pixels are dropped. When no validation set is passed, a
    seeded stratified fraction of the training pixels is held out for
    model selection.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("features must be (N, d) with aligned labels")

    supervised = y != UNLABELED
    x = x[supervised]
    y = y[supervised].astype(np.int64)
    if x.shape[0] == 0:
        raise ValueError("no supervised pixels: every label is UNLABELED")

    order = _canonical_order(x, y)
    x = x[order]
    y = y[order]

    n_classes = int(y.max()) + 1
    rng = np.random.default_rng(cfg.seed)

    if val_features is None:
        # stratified holdout, at least one training pixel kept per class
        val_mask = np.zeros(len(y), dtype=bool)
        for c in range(n_classes):
            idx = np.flatnonzero(y == c)
            if idx.size == 0:
                continue
            n_val = min(int(round(cfg.val_fraction * idx.size)), idx.size - 1)
            if n_val > 0:
                val_mask[rng.permutation(idx)[:n_val]] = True
        xv, yv = x[val_mask], y[val_mask]
        x, y = x[~val_mask], y[~val_mask]
        if xv.shape[0] == 0:
            xv, yv = x, y  # degenerate tiny input: select on the training pixels
    else:
        xv = np.asarray(val_features, dtype=np.float64)
        yv = np.asarray(val_labels).ravel()
        vkeep = yv != UNLABELED
        xv, yv = xv[vkeep], yv[vkeep].astype(np.int64)
        if xv.shape[0] == 0:
            raise ValueError("no supervised pixels in the validation set")

    counts = np.bincount(y, minlength=n_classes)
    if cfg.weight_mode == "inverse_frequency":
        w_class = class_weights(counts)
    else:
        class_weights(counts)  # still reject zero-count classes
        w_class = np.ones(n_classes)

    d = x.shape[1]
    weights = np.zeros((n_classes, d))
    bias = np.zeros(n_classes)
    lr = cfg.learning_rate
    batch = x.shape[0] if cfg.batch_size is None else min(cfg.batch_size, x.shape[0])

    history = []
    best_miou = -1.0
    best_epoch = -1
    best = (weights.copy(), bias.copy())
    best_val_loss = np.inf
    epochs_since_improvement = 0

    for epoch in range(cfg.epochs):
        perm = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch):
            idx = perm[start : start + batch]
            loss_b, g_w, g_b = loss_and_grad(weights, bias, x[idx], y[idx], w_class)
            if not np.isfinite(loss_b):
                raise ValueError(f"training diverged: non-finite loss at epoch {epoch}")
            weights -= lr * g_w
            bias -= lr * g_b

        epoch_loss, _, _ = loss_and_grad(weights, bias, x, y, w_class)
        val_loss, _, _ = loss_and_grad(weights, bias, xv, yv, w_class)
        if not (np.isfinite(epoch_loss) and np.isfinite(val_loss)):
            raise ValueError(f"training diverged: non-finite loss at epoch {epoch}")
        val_pred = np.argmax(predict_logits(LinearHead(weights, bias), xv), axis=1)
        val_miou = mean_iou(yv, val_pred, n_classes)
        history.append({"loss": epoch_loss, "val_loss": val_loss, "val_miou": val_miou, "lr": lr})

        if val_miou > best_miou:
            best_miou = val_miou
            best_epoch = epoch
            best = (weights.copy(), bias.copy())

        if val_loss < best_val_loss:
            best_val_loss = val_loss
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= cfg.patience:
                lr *= cfg.lr_decay
                epochs_since_improvement = 0

    return TrainResult(
        head=LinearHead(best[0], best[1]),
        history=history,
        best_epoch=best_epoch,
        class_weights=w_class,
    )


def save_head(path, head: LinearHead) -> None:
    """Single tensor [W | b] of shape (C, d+1), float64."""
    packed = np.concatenate([head.weights, head.bias[:, None]], axis=1)
    tensorio.write_tensor(path, packed.astype(np.float64), kind="head")


def load_head(path) -> LinearHead:
    tf = tensorio.read_tensor(path)
    if tf.kind != "head":
        raise ValueError(f"expected a head tensor, got kind {tf.kind!r}")
    packed = tf.values
    return LinearHead(weights=packed[:, :-1], bias=packed[:, -1])
