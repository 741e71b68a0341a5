"""End-to-end inference: tiles in, extended label maps and reports out.

Flow per tile: load feature maps (either one pre-averaged map or one map
per sub-window shift), run the linear head, shift-average probabilities and
features over the central region, score every pixel with the configured
method, apply thresholds, relabel small connected detections as healthy,
then accumulate metrics and per-slide area reports.

Single-threaded and deterministic: identical config + inputs give identical
output bytes. Every run writes a manifest with the configuration and its
hash.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.ndimage

from . import calib, head as head_mod, metrics, scores, synthgen, tensorio, thresholds, tiles
from .labelspace import UNLABELED, ood_label

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass
class RunConfig:
    data_dir: str = ""
    split: str = "test"
    head_path: str = ""
    stats_prefix: str = ""
    thresholds_path: str = ""
    out_dir: str = ""
    method: str = "maha+"
    mode: str = "adaptive"
    p: float = 0.996
    min_area: int = 0
    seed: int = 0
    tile: int = 672
    window: int = 252
    stride: int = 84
    latent_scale: int = 14
    react_percentile: float = 90.0

    def shift_config(self) -> tiles.ShiftConfig:
        return tiles.ShiftConfig(self.tile, self.window, self.stride, self.latent_scale)


def save_config(path, cfg: RunConfig) -> None:
    tensorio.write_sidecar(path, {f.name: getattr(cfg, f.name) for f in fields(cfg)})


def load_config(path) -> RunConfig:
    raw = tensorio.read_sidecar(path)
    kwargs = {}
    for f in fields(RunConfig):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if f.type == "int":
            kwargs[f.name] = int(value)
        elif f.type == "float":
            kwargs[f.name] = float(value)
        else:
            kwargs[f.name] = value
    return RunConfig(**kwargs)


def config_hash(cfg: RunConfig) -> str:
    text = "\n".join(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg))
    return hashlib.sha256(text.encode()).hexdigest()


def write_run_manifest(out_dir, cfg: RunConfig, extra: dict | None = None) -> None:
    entries = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    entries["config_hash"] = config_hash(cfg)
    for key, value in (extra or {}).items():
        entries[key] = value
    tensorio.write_sidecar(os.path.join(out_dir, "run_manifest.txt"), entries)


# ---------------------------------------------------------------- loading

def load_split(data_dir, split: str):
    """Read one split from a dataset directory. Returns a list of tiles
    {tile, features | shift_maps, labels}; tiles listed with explicit shifts
    come back as per-shift map lists for averaging."""
    manifest = synthgen.read_manifest(os.path.join(data_dir, synthgen.MANIFEST_NAME))
    rows = [r for r in manifest if r["split"] == split]
    if not rows:
        raise ValueError(f"no input tiles for split {split!r} in {data_dir}")
    by_tile: dict[str, list] = {}
    for r in rows:
        by_tile.setdefault(r["tile"], []).append(r)

    out = []
    for tile_id in sorted(by_tile):
        tile_rows = by_tile[tile_id]
        labels = None
        lab_name = tile_rows[0]["labels"]
        if lab_name != "-":
            labels = tensorio.read_tensor(os.path.join(data_dir, lab_name)).values
        if len(tile_rows) == 1 and tile_rows[0]["shift_x"] == "-":
            fm = tensorio.read_tensor(os.path.join(data_dir, tile_rows[0]["features"])).values
            out.append({"tile": tile_id, "features": fm, "labels": labels})
        else:
            shift_maps = []
            for r in sorted(tile_rows, key=lambda r: (int(r["shift_y"]), int(r["shift_x"]))):
                fm = tensorio.read_tensor(os.path.join(data_dir, r["features"])).values
                shift_maps.append(((int(r["shift_x"]), int(r["shift_y"])), fm))
            out.append({"tile": tile_id, "shift_maps": shift_maps, "labels": labels})
    return out


def flatten_split(data_dir, split: str, cfg: "RunConfig | None" = None):
    """All pixels of a split as flat arrays: (N, d) averaged features and
    (N,) labels (UNLABELED where a tile carries no annotation)."""
    entries = load_split(data_dir, split)
    feats, labs = [], []
    for entry in entries:
        if "features" in entry:
            fm = entry["features"].astype(np.float64)
        else:
            fm = tiles.average_features(entry["shift_maps"], (cfg or RunConfig()).shift_config())
        d = fm.shape[0]
        feats.append(fm.reshape(d, -1).T)
        if entry["labels"] is None:
            labs.append(np.full(fm.shape[1] * fm.shape[2], UNLABELED, dtype=np.int64))
        else:
            labs.append(np.asarray(entry["labels"]).reshape(-1).astype(np.int64))
    return np.concatenate(feats), np.concatenate(labs)


# ------------------------------------------------------------- inference

def _tile_features_probs(entry, head, cfg: RunConfig):
    """Per-tile averaged feature map (d, h, w) and probability map (C, h, w)."""
    if "features" in entry:
        fm = entry["features"].astype(np.float64)
        logits, probs = head_mod.infer(head, fm)
        return fm, probs
    shift_cfg = cfg.shift_config()
    shift_maps = entry["shift_maps"]
    prob_maps = []
    for shift, fm in shift_maps:
        _, probs = head_mod.infer(head, fm.astype(np.float64))
        prob_maps.append((shift, probs))
    fm_avg = tiles.average_features(shift_maps, shift_cfg)
    probs_avg = tiles.average_probs(prob_maps, shift_cfg, cell=shift_cfg.latent_scale)
    return fm_avg, probs_avg


def score_pixels(
    method: str,
    features: np.ndarray,
    logits: np.ndarray,
    probs: np.ndarray,
    predicted: np.ndarray,
    stats: calib.ClassStats | None = None,
    head: head_mod.LinearHead | None = None,
    clamp: scores.ReactClamp | None = None,
    profiles: scores.KLProfiles | None = None,
) -> np.ndarray:
    """Dispatch one scoring method over flat pixel arrays."""
    if method == "maha":
        return scores.maha_score(features, stats)
    if method == "maha+":
        return scores.maha_plus_score(features, predicted, stats)
    if method == "msp":
        return scores.msp_score(probs)
    if method == "maxlogit":
        return scores.maxlogit_score(logits)
    if method == "energy":
        return scores.energy_score(logits)
    if method == "react":
        return scores.react_score(features, head, clamp)
    if method == "klm":
        return scores.kl_matching_score(probs, profiles)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class ScoringContext:
    """Everything a scoring method might need besides the pixel data."""

    head: head_mod.LinearHead
    stats: calib.ClassStats | None = None
    clamp: scores.ReactClamp | None = None
    profiles: scores.KLProfiles | None = None


def fit_scoring_context(
    method: str,
    head: head_mod.LinearHead,
    calib_features: np.ndarray,
    calib_labels: np.ndarray,
    react_percentile: float = 90.0,
) -> ScoringContext:
    """Fit whatever the method calibrates from labeled in-distribution
    pixels: Gaussian stats, activation clamp, or class probability
    profiles."""
    keep = (calib_labels != UNLABELED) & (calib_labels < head.n_classes)
    x = calib_features[keep]
    y = calib_labels[keep]
    ctx = ScoringContext(head=head)
    if method in ("maha", "maha+"):
        ctx.stats = calib.estimate(x, y, normalize=(method == "maha+"), n_classes=head.n_classes)
    elif method == "react":
        ctx.clamp = scores.fit_react_clamp(x, react_percentile)
    elif method == "klm":
        _, probs = head_mod.infer(head, x)
        ctx.profiles = scores.fit_kl_profiles(probs, y)
    return ctx


def score_tiles(tile_entries, ctx: ScoringContext, method: str, cfg: RunConfig):
    """Predicted class map and score map for every tile."""
    results = []
    for entry in tile_entries:
        fm, probs = _tile_features_probs(entry, ctx.head, cfg)
        d, h, w = fm.shape
        flat_features = fm.reshape(d, -1).T
        logits, flat_probs = head_mod.infer(ctx.head, flat_features)
        # predictions come from the averaged probabilities, ties to the
        # lowest class index
        pred = tiles.predict_classes(probs).reshape(-1)
        s = score_pixels(
            method, flat_features, logits, probs.reshape(probs.shape[0], -1).T, pred,
            stats=ctx.stats, head=ctx.head, clamp=ctx.clamp, profiles=ctx.profiles,
        )
        results.append(
            {
                "tile": entry["tile"],
                "pred": pred.reshape(h, w),
                "scores": np.asarray(s).reshape(h, w),
                "labels": entry.get("labels"),
            }
        )
    return results


def filter_small_components(extended_labels: np.ndarray, min_area: int, healthy: int = 0) -> np.ndarray:
    """Relabel 4-connected non-healthy components smaller than ``min_area``
    pixels back to healthy. min_area = 0 is the identity; the operation is
    idempotent."""
    if min_area < 0:
        raise ValueError("min_area must be non-negative")
    out = np.asarray(extended_labels).copy()
    if min_area == 0:
        return out
    mask = out != healthy
    comp, n = scipy.ndimage.label(mask, structure=_FOUR_CONN)
    if n == 0:
        return out
    areas = np.bincount(comp.ravel())
    small = np.flatnonzero(areas < min_area)
    small = small[small != 0]  # 0 is background
    if small.size:
        out[np.isin(comp, small)] = healthy
    return out


# --------------------------------------------------------------- reports

@dataclass
class WsiReport:
    """Per-slide class area shares (%) over tissue pixels, plus group means
    when a slide -> group mapping is given."""

    per_wsi: dict      # wsi id -> {class id: percent, "anomaly": percent}
    per_group: dict    # group id -> same, averaged over the group's slides


def wsi_report(
    labeled_maps,
    n_id_classes: int,
    neutral_classes=(),
    groups: dict | None = None,
) -> WsiReport:
    """Area shares from extended label maps.

    labeled_maps: sequence of (wsi_id, extended label map). Neutral classes
    (e.g. tissue-free regions) are excluded from the denominator. The
    "anomaly" entry pools every non-healthy, non-neutral label.
    """
    per_wsi = {}
    classes = list(range(n_id_classes)) + [ood_label(n_id_classes)]
    for wsi_id, lm in labeled_maps:
        lm = np.asarray(lm).ravel()
        keep = lm != UNLABELED
        for c in neutral_classes:
            keep &= lm != c
        total = int(keep.sum())
        if total == 0:
            raise ValueError(f"slide {wsi_id} has no tissue pixels")
        shares = {}
        anomaly = 0.0
        for c in classes:
            if c in neutral_classes:
                continue
            pct = 100.0 * int((lm[keep] == c).sum()) / total
            shares[c] = pct
            if c != 0:
                anomaly += pct
        shares["anomaly"] = anomaly
        per_wsi[wsi_id] = shares

    per_group = {}
    if groups:
        by_group: dict = {}
        for wsi_id, shares in per_wsi.items():
            by_group.setdefault(groups.get(wsi_id, "ungrouped"), []).append(shares)
        for gid, rows in by_group.items():
            keys = rows[0].keys()
            per_group[gid] = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return WsiReport(per_wsi=per_wsi, per_group=per_group)


def wsi_report_csv(report: WsiReport) -> str:
    all_keys = sorted({k for shares in report.per_wsi.values() for k in shares}, key=str)
    lines = ["wsi," + ",".join(str(k) for k in all_keys)]
    for wsi_id in sorted(report.per_wsi):
        shares = report.per_wsi[wsi_id]
        lines.append(f"{wsi_id}," + ",".join(repr(float(shares.get(k, 0.0))) for k in all_keys))
    return "\n".join(lines) + "\n"


def emit_sweep_plot_data(result: thresholds.SweepResult, method: str, mode: str, path=None) -> str:
    """Sweep table as CSV (p, method, mode, fnr_bar, fpr, ber); floats round-trip."""
    text = result.as_csv(method=method, mode=mode)
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def read_sweep_csv(path_or_text) -> list:
    text = path_or_text
    if os.path.exists(str(path_or_text)):
        with open(path_or_text) as f:
            text = f.read()
    rows = []
    lines = [ln for ln in text.strip().split("\n")]
    if lines[0] != "p,method,mode,fnr_bar,fpr,ber":
        raise ValueError("not a sweep table")
    for ln in lines[1:]:
        p, method, mode, fnr, fpr_, ber_ = ln.split(",")
        rows.append((float(p), method, mode, float(fnr), float(fpr_), float(ber_)))
    return rows


# -------------------------------------------------------------- upsampling

def upsample_scores(score_map: np.ndarray, scale: int) -> np.ndarray:
    """Bilinear upsampling of a (H, W) score map by an integer factor,
    with half-pixel-aligned sampling."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    sm = np.asarray(score_map, dtype=np.float64)
    if scale == 1:
        return sm.copy()
    h, w = sm.shape
    ys = (np.arange(h * scale) + 0.5) / scale - 0.5
    xs = (np.arange(w * scale) + 0.5) / scale - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = sm[np.ix_(y0, x0)] * (1 - wx) + sm[np.ix_(y0, x1)] * wx
    bottom = sm[np.ix_(y1, x0)] * (1 - wx) + sm[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def upsample_labels(label_map: np.ndarray, scale: int) -> np.ndarray:
    """Nearest-neighbor upsampling for label maps (exact block replication)."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    lm = np.asarray(label_map)
    return np.repeat(np.repeat(lm, scale, axis=0), scale, axis=1)


# ----------------------------------------------------------------- runner

@dataclass
class InferenceResult:
    extended_maps: dict        # tile id -> extended label map
    score_maps: dict           # tile id -> score map
    confusion: metrics.ExtendedConfusion | None
    report: metrics.MetricReport | None
    wsi: WsiReport


def run_inference(
    cfg: RunConfig,
    head: head_mod.LinearHead | None = None,
    ctx: ScoringContext | None = None,
    ts: thresholds.ThresholdSet | None = None,
    neutral_classes=(),
) -> InferenceResult:
    """Run the full per-tile flow on cfg.split of cfg.data_dir.

    Head, scoring context, and thresholds may be passed in-memory; otherwise
    they are loaded from the configured paths. Writes extended label maps,
    score maps, metrics, and a run manifest into cfg.out_dir when set.
    """
    if head is None:
        head = head_mod.load_head(cfg.head_path)
    if ctx is None:
        ctx = ScoringContext(head=head)
        if cfg.method in ("maha", "maha+"):
            ctx.stats = calib.load_stats(cfg.stats_prefix)
    if ts is None:
        ts = thresholds.load_thresholds(cfg.thresholds_path)

    entries = load_split(cfg.data_dir, cfg.split)
    scored = score_tiles(entries, ctx, cfg.method, cfg)

    extended_maps = {}
    score_maps = {}
    confusion = None
    have_labels = True
    for item in scored:
        ext = thresholds.decide(item["scores"], item["pred"], ts)
        ext = filter_small_components(ext, cfg.min_area)
        extended_maps[item["tile"]] = ext
        score_maps[item["tile"]] = item["scores"]
        if item["labels"] is None:
            have_labels = False
        else:
            cm = metrics.accumulate(item["labels"], ext, head.n_classes, neutral_classes)
            confusion = cm if confusion is None else confusion + cm

    report = metrics.breakdown(confusion) if (have_labels and confusion is not None) else None
    wsi = wsi_report(sorted(extended_maps.items()), head.n_classes, neutral_classes)

    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        for tile_id in sorted(extended_maps):
            tensorio.write_tensor(
                os.path.join(cfg.out_dir, f"{tile_id}.extended.oods"),
                extended_maps[tile_id].astype(np.int32),
                kind="label",
            )
            scores.save_score_map(
                os.path.join(cfg.out_dir, f"{tile_id}.scores.oods"),
                score_maps[tile_id],
                cfg.method,
            )
        with open(os.path.join(cfg.out_dir, "wsi_report.csv"), "w") as f:
            f.write(wsi_report_csv(wsi))
        if report is not None:
            agg = metrics.aggregate_seeds([report])
            with open(os.path.join(cfg.out_dir, "metrics.csv"), "w") as f:
                f.write(metrics.report_csv(agg))
        write_run_manifest(cfg.out_dir, cfg, {"tiles": len(extended_maps)})

    return InferenceResult(
        extended_maps=extended_maps,
        score_maps=score_maps,
        confusion=confusion if have_labels else None,
        report=report,
        wsi=wsi,
    )
