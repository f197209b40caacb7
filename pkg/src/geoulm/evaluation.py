"""Gated localization scoring and density-map rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import UndefinedMetricError, ValidationError


@dataclass(frozen=True)
class FrameScore:
    true_positives: int
    false_positives: int
    false_negatives: int
    rmse: float = math.nan
    frame_id: int = 0


@dataclass(frozen=True)
class DensityImage:
    grid: np.ndarray
    pixel_size: float
    origin: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValidationError("pixel_size must be positive")
        g = np.asarray(self.grid, dtype=float)
        if np.any(g < 0):
            raise ValidationError("density intensities must be non-negative")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))

    def display(self) -> np.ndarray:
        """Grid scaled to [0, 1] with the display gamma applied."""
        top = self.grid.max()
        if top == 0:
            return np.zeros_like(self.grid)
        return (self.grid / top) ** self.gamma


def _positions(items) -> np.ndarray:
    if hasattr(items, "scatterer_positions"):
        return items.scatterer_positions
    items = list(items)
    if items and hasattr(items[0], "position"):
        return np.array([m.position for m in items]).reshape(-1, 2)
    return np.asarray(items, dtype=float).reshape(-1, 2)


def greedy_pairs(est: np.ndarray, gt: np.ndarray, gate: float):
    """One-to-one pairs by ascending distance, keeping those under ``gate``."""
    if len(est) == 0 or len(gt) == 0:
        return []
    d = np.hypot(*(est[:, None, :] - gt[None, :, :]).transpose(2, 0, 1))
    ii, jj = np.nonzero(d < gate)
    order = np.lexsort((jj, ii, d[ii, jj]))
    used_e, used_g, pairs = set(), set(), []
    for i, j in zip(ii[order], jj[order]):
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        pairs.append((int(i), int(j), float(d[i, j])))
    return pairs


def match_and_score(estimates, truth, wavelength: float, gate_fraction: float = 0.25,
                    frame_id: int | None = None) -> FrameScore:
    """TP/FP/FN and RMSE with a ``gate_fraction * wavelength`` acceptance radius."""
    if not wavelength > 0:
        raise ValidationError("wavelength must be positive")
    est, gt = _positions(estimates), _positions(truth)
    pairs = greedy_pairs(est, gt, gate_fraction * wavelength)
    tp = len(pairs)
    rmse = math.sqrt(sum(p[2] ** 2 for p in pairs) / tp) if tp else math.nan
    if frame_id is None:
        frame_id = getattr(truth, "frame_id", 0)
    return FrameScore(tp, len(est) - tp, len(gt) - tp, rmse, frame_id)


def jaccard(scores) -> float:
    scores = list(scores)
    if not scores:
        raise UndefinedMetricError("no frames to score")
    tp = sum(s.true_positives for s in scores)
    denom = tp + sum(s.false_positives + s.false_negatives for s in scores)
    if denom == 0:
        raise UndefinedMetricError("Jaccard index undefined without any detections or truths")
    return 100.0 * tp / denom


def aggregate_rmse(scores, wavelength: float):
    """Mean and population std of per-frame RMSE in tenths of a wavelength."""
    vals = [s.rmse for s in scores if s.true_positives > 0]
    if not vals:
        raise UndefinedMetricError("no true positives in any frame")
    v = np.array(vals) / (wavelength / 10)
    return float(v.mean()), float(v.std())


def render_density(locations, origin, shape, pixel_size: float, gamma: float = 1.0) -> DensityImage:
    """Accumulate location counts on a ``shape = (nz, nx)`` grid.

    Pixel ``(row, col)`` covers ``z`` in ``origin[1] + row * pixel_size`` and
    ``x`` in ``origin[0] + col * pixel_size``. Locations outside are dropped.
    """
    nz, nx = int(shape[0]), int(shape[1])
    if nz <= 0 or nx <= 0:
        raise ValidationError("density grid must be non-empty")
    grid = np.zeros((nz, nx))
    pos = _positions(locations)
    if len(pos):
        origin = np.asarray(origin, dtype=float)
        col = np.floor((pos[:, 0] - origin[0]) / pixel_size).astype(int)
        row = np.floor((pos[:, 1] - origin[1]) / pixel_size).astype(int)
        ok = (row >= 0) & (row < nz) & (col >= 0) & (col < nx)
        np.add.at(grid, (row[ok], col[ok]), 1.0)
    return DensityImage(grid, pixel_size, origin, gamma)


def ssim(image_a, image_b, sigma: float = 1.5, win_size: int = 11,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity in percent with a Gaussian window.

    The dynamic range is taken from both images jointly; borders closer than
    half a window are excluded from the mean.
    """
    a = image_a.grid if isinstance(image_a, DensityImage) else np.asarray(image_a, dtype=float)
    b = image_b.grid if isinstance(image_b, DensityImage) else np.asarray(image_b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"image grids differ: {a.shape} vs {b.shape}")
    if isinstance(image_a, DensityImage) and isinstance(image_b, DensityImage):
        if (image_a.pixel_size != image_b.pixel_size
                or not np.array_equal(image_a.origin, image_b.origin)):
            raise ValidationError("image grids differ in pixel size or origin")
    if min(a.shape) < win_size:
        raise ValidationError(f"images must be at least {win_size} pixels per side")
    rng = max(a.max(), b.max()) - min(a.min(), b.min())
    if rng == 0:
        rng = 1.0
    c1, c2 = (k1 * rng) ** 2, (k2 * rng) ** 2
    truncate = ((win_size - 1) / 2) / sigma

    def filt(x):
        return gaussian_filter(x, sigma, truncate=truncate)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    pad = (win_size - 1) // 2
    return 100.0 * float(s[pad:-pad, pad:-pad].mean())
