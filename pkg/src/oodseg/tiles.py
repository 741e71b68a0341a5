"""Extended-tile geometry and test-time shift averaging.

A slide is covered by non-overlapping central windows of side t; each is
evaluated inside a larger extended tile of side T, over a grid of shifted
sub-windows:

    shifts = {(x, y): x, y in {0, k, 2k, ..., T - t}}

so the number of shifts is ((T - t)/k + 1)^2. Per-pixel outputs of all
sub-windows covering a pixel of the central region are averaged. T < 3t
guarantees every shift overlaps the central region; when k divides t the
per-pixel coverage count is the same everywhere in it.

Extended tiles that stick out past the slide border are filled by
reflection padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ShiftConfig:
    tile: int = 672          # extended tile side T
    window: int = 252        # central / sub-window side t
    stride: int = 84         # shift stride k
    latent_scale: int = 14   # pixels per latent cell

    def __post_init__(self):
        if self.stride < 1 or self.latent_scale < 1:
            raise ValueError("stride and latent_scale must be positive")
        if self.window >= self.tile:
            raise ValueError("window must be smaller than the extended tile")
        if self.tile >= 3 * self.window:
            raise ValueError("need T < 3t so every shift overlaps the central region")
        if (self.tile - self.window) % self.stride != 0:
            raise ValueError("stride must divide T - t")
        if (self.tile - self.window) % 2 != 0:
            raise ValueError("T - t must be even so the central region is pixel-aligned")
        if self.window % self.latent_scale != 0:
            raise ValueError("window must be divisible by latent_scale")

    @property
    def margin(self) -> int:
        """Offset of the central region inside the extended tile."""
        return (self.tile - self.window) // 2

    @property
    def n_shifts(self) -> int:
        steps = (self.tile - self.window) // self.stride + 1
        return steps * steps


def enumerate_shifts(cfg: ShiftConfig) -> list[tuple[int, int]]:
    """All (x, y) sub-window origins, row-major."""
    steps = range(0, cfg.tile - cfg.window + 1, cfg.stride)
    return [(x, y) for y in steps for x in steps]


def _average_shift_maps(shift_maps, cfg: ShiftConfig, cell: int) -> np.ndarray:
    """Mean over covering sub-windows on the central region, on a grid of
    ``cell`` pixels per map cell. Accumulation in float64."""
    if not shift_maps:
        raise ValueError("empty shift set")
    if cfg.margin % cell != 0:
        raise ValueError(f"central region offset {cfg.margin} is not aligned to the {cell}-pixel grid")
    side = cfg.window // cell
    first = np.asarray(shift_maps[0][1])
    if first.ndim != 3:
        raise ValueError("shift maps must be (channels, side, side)")
    channels = first.shape[0]

    acc = np.zeros((channels, side, side), dtype=np.float64)
    cover = np.zeros((side, side), dtype=np.int64)
    c0 = cfg.margin // cell  # central region origin in grid cells

    for (x, y), m in shift_maps:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (channels, side, side):
            raise ValueError(f"shift map shape {m.shape} does not match ({channels}, {side}, {side})")
        if not (0 <= x <= cfg.tile - cfg.window and 0 <= y <= cfg.tile - cfg.window):
            raise ValueError(f"shift ({x}, {y}) outside the extended tile")
        if x % cell or y % cell:
            raise ValueError(f"shift ({x}, {y}) is not aligned to the {cell}-pixel grid")
        gx, gy = x // cell, y // cell
        # overlap of the sub-window [gx, gx+side) with the central region [c0, c0+side)
        x0, x1 = max(gx, c0), min(gx + side, c0 + side)
        y0, y1 = max(gy, c0), min(gy + side, c0 + side)
        if x0 >= x1 or y0 >= y1:
            continue
        acc[:, y0 - c0 : y1 - c0, x0 - c0 : x1 - c0] += m[:, y0 - gy : y1 - gy, x0 - gx : x1 - gx]
        cover[y0 - c0 : y1 - c0, x0 - c0 : x1 - c0] += 1

    if np.any(cover == 0):
        raise ValueError("coverage violation: some central pixels are covered by no shift")
    return acc / cover


def average_probs(shift_maps, cfg: ShiftConfig, cell: int = 1) -> np.ndarray:
    """Average per-shift probability maps over the central region.

    shift_maps: sequence of ((x, y), (C, t/cell, t/cell) array) pairs with
    shifts in pixel units. The mean of simplex rows stays on the simplex.
    """
    return _average_shift_maps(shift_maps, cfg, cell)


def average_features(shift_maps, cfg: ShiftConfig) -> np.ndarray:
    """Average per-shift latent feature maps (d, t', t') with t' = t /
    latent_scale. Shifts must be latent-aligned."""
    return _average_shift_maps(shift_maps, cfg, cfg.latent_scale)


def predict_classes(mean_probs: np.ndarray) -> np.ndarray:
    """Argmax over the channel axis; ties resolve to the lowest class index."""
    return np.argmax(mean_probs, axis=0)


@dataclass
class TileGrid:
    """Placement of extended tiles over a slide of the given extent. Central
    windows tile the covered area disjointly; extended origins may be
    negative (the border is reflection-padded on extraction)."""

    width: int
    height: int
    cfg: ShiftConfig
    central_origins: list = field(default_factory=list)
    extended_origins: list = field(default_factory=list)


def plan_grid(width: int, height: int, cfg: ShiftConfig) -> TileGrid:
    if width < 1 or height < 1:
        raise ValueError("empty extent")
    t = cfg.window
    grid = TileGrid(width=width, height=height, cfg=cfg)
    for y in range(0, height, t):
        for x in range(0, width, t):
            grid.central_origins.append((x, y))
            grid.extended_origins.append((x - cfg.margin, y - cfg.margin))
    return grid


def grid_manifest(grid: TileGrid) -> str:
    """Plain-text listing: index, central origin, extended origin."""
    lines = [f"extent = {grid.width} x {grid.height}", f"tiles = {len(grid.central_origins)}"]
    for i, ((cx, cy), (ex, ey)) in enumerate(zip(grid.central_origins, grid.extended_origins)):
        lines.append(f"tile {i}: central=({cx},{cy}) extended=({ex},{ey})")
    return "\n".join(lines) + "\n"


def extract_extended_tile(array: np.ndarray, origin: tuple[int, int], size: int) -> np.ndarray:
    """Cut a size x size window at ``origin`` (x, y) from a (H, W) or
    (C, H, W) array, reflecting at the borders where the window sticks out."""
    a = np.asarray(array)
    spatial = a.shape[-2:]
    x, y = origin
    pad_left = max(0, -x)
    pad_top = max(0, -y)
    pad_right = max(0, x + size - spatial[1])
    pad_bottom = max(0, y + size - spatial[0])
    if any((pad_left, pad_top, pad_right, pad_bottom)):
        pad_spec = [(0, 0)] * (a.ndim - 2) + [(pad_top, pad_bottom), (pad_left, pad_right)]
        a = np.pad(a, pad_spec, mode="reflect")
        x += pad_left
        y += pad_top
    return a[..., y : y + size, x : x + size].copy()


@dataclass
class CropRules:
    """Minimum annotation a training crop must contain for the class it was
    sampled for, as a fraction of the crop area. A fraction of 0 means the
    bare minimum of one annotated pixel (point-like findings); sparse but
    extended findings commonly use 0.005, everything else the default 0.01."""

    default_fraction: float = 0.01
    per_class: dict = field(default_factory=dict)

    def required_pixels(self, class_id: int, crop_area: int) -> float:
        fraction = self.per_class.get(class_id, self.default_fraction)
        if fraction < 0:
            raise ValueError("annotation fraction must be non-negative")
        return 1.0 if fraction == 0.0 else fraction * crop_area


def sample_training_crop(
    labels: np.ndarray,
    class_of_interest: int,
    rng: np.random.Generator,
    window: int,
    rules: CropRules | None = None,
    max_attempts: int = 64,
) -> tuple[int, int]:
    """Rejection-sample the (x, y) origin of a window x window crop whose
    annotation of ``class_of_interest`` satisfies that class's rule. Raises
    after ``max_attempts`` rejected draws."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-D map")
    h, w = labels.shape
    if window > min(h, w):
        raise ValueError("crop window larger than the labeled map")
    rules = rules or CropRules()
    needed = rules.required_pixels(class_of_interest, window * window)
    for _ in range(max_attempts):
        x = int(rng.integers(0, w - window + 1))
        y = int(rng.integers(0, h - window + 1))
        count = np.count_nonzero(labels[y : y + window, x : x + window] == class_of_interest)
        if count >= needed:
            return x, y
    raise ValueError(
        f"no admissible crop for class {class_of_interest} after {max_attempts} attempts"
    )
