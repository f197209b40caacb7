"""Mean-shift fusion of intersection candidates into bubble positions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted


@dataclass(frozen=True)
class MBLocation:
    position: np.ndarray
    support: int
    spread: float
    frame_id: int = 0


@dataclass(frozen=True)
class ClusterConfig:
    """Mean-shift settings; lengths are in units of ``bandwidth``.

    ``bandwidth = None`` means a quarter wavelength, resolved by the caller.
    """

    bandwidth: float | None = None
    min_cluster_size: int = 2
    tol: float = 1e-3
    max_iter: int = 100
    merge_radius: float = 0.5
    seed_cap: int = 10_000
    condition_ref: float = 100.0


def kernel_weights(points, p, bandwidth, weights=None) -> np.ndarray:
    d = points - p
    k = np.exp(-(d[:, 0] ** 2 + d[:, 1] ** 2) / (2 * bandwidth * bandwidth))
    return k if weights is None else k * weights


def mean_shift_step(p, candidates, bandwidth: float, weights=None) -> np.ndarray:
    """Gaussian-kernel weighted mean of ``candidates`` seen from ``p``."""
    pts = np.asarray(candidates, dtype=float).reshape(-1, 2)
    k = kernel_weights(pts, np.asarray(p, dtype=float), bandwidth, weights)
    total = k.sum()
    if total == 0:
        return np.asarray(p, dtype=float)
    return (k[:, None] * pts).sum(axis=0) / total


def density(p, candidates, bandwidth: float, weights=None) -> float:
    pts = np.asarray(candidates, dtype=float).reshape(-1, 2)
    return float(kernel_weights(pts, np.asarray(p, dtype=float), bandwidth, weights).sum())


def mean_shift_trajectory(start, candidates, bandwidth: float, weights=None,
                          tol: float = 1e-3, max_iter: int = 100) -> np.ndarray:
    """Iterates of mean shift from ``start`` until the step drops below ``tol * bandwidth``."""
    p = np.asarray(start, dtype=float)
    path = [p]
    for _ in range(max_iter):
        new = mean_shift_step(p, candidates, bandwidth, weights)
        path.append(new)
        if np.hypot(*(new - p)) < tol * bandwidth:
            break
        p = new
    return np.array(path)


def condition_weights(conditions, condition_ref: float) -> np.ndarray:
    """Down-weight glancing intersections; 1 for well-conditioned pairs."""
    c = np.asarray(conditions, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        w = 1.0 / (1.0 + (c / condition_ref) ** 2)
    return np.where(np.isfinite(w), w, 0.0)


def _converge(seeds, pts, w, h, tol, max_iter):
    modes = seeds.copy()
    active = np.ones(len(modes), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        cur = modes[active]
        d = cur[:, None, :] - pts[None, :, :]
        k = np.exp(-(d[..., 0] ** 2 + d[..., 1] ** 2) / (2 * h * h)) * w[None, :]
        total = k.sum(axis=1)
        new = (k[:, :, None] * pts[None, :, :]).sum(axis=1) / np.where(total > 0, total, 1.0)[:, None]
        new[total == 0] = cur[total == 0]
        step = np.hypot(*(new - cur).T)
        modes[active] = new
        idx = np.flatnonzero(active)
        active[idx[step < tol * h]] = False
    return modes


def _grid_seeds(pts, h):
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    gx = np.arange(lo[0], hi[0] + h, h)
    gz = np.arange(lo[1], hi[1] + h, h)
    grid = np.array(np.meshgrid(gx, gz, indexing="ij")).reshape(2, -1).T
    keep = [i for i, g in enumerate(grid) if np.any(np.hypot(*(pts - g).T) < h)]
    return grid[keep]


def mean_shift_modes(points, weights, cfg: ClusterConfig, bandwidth: float):
    """Cluster points; returns ``(centers, labels, spreads)`` in input order.

    Points are processed in a canonical order relative to their
    componentwise minimum, which makes the result independent of input
    order and exactly translation-equivariant for translations that are
    representable without rounding.
    """
    pts_in = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts_in)
    w_in = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros(0)
    h = float(bandwidth)
    anchor = pts_in.min(axis=0)
    rel_in = pts_in - anchor
    order = np.lexsort((w_in, rel_in[:, 1], rel_in[:, 0]))
    rel, w = rel_in[order], w_in[order]
    seeds = rel if n <= cfg.seed_cap else _grid_seeds(rel, h)
    modes = _converge(seeds, rel, w, h, cfg.tol, cfg.max_iter)

    # merge modes in seed order
    centers, support = [], []
    mode_label = np.empty(len(modes), dtype=int)
    for i, m in enumerate(modes):
        if centers:
            d = np.hypot(*(np.array(centers) - m).T)
            j = int(np.argmin(d))
            if d[j] < cfg.merge_radius * h:
                mode_label[i] = j
                support[j] += 1
                continue
        centers.append(m)
        support.append(1)
        mode_label[i] = len(centers) - 1

    if n <= cfg.seed_cap:
        labels = mode_label
    else:
        c = np.array(centers)
        labels = np.array([int(np.argmin(np.hypot(*(c - p).T))) for p in rel])

    out_centers, out_spread = [], []
    final = np.full(n, -1)
    for j in range(len(centers)):
        members = np.flatnonzero(labels == j)
        mpts, mw = rel[members], w[members]
        p = np.asarray(centers[j])
        for _ in range(cfg.max_iter):
            new = mean_shift_step(p, mpts, h, mw)
            if np.hypot(*(new - p)) < 1e-9 * h:
                p = new
                break
            p = new
        dist = np.hypot(*(mpts - p).T)
        inside = dist <= 2 * h
        members, dist = members[inside], dist[inside]
        if len(members) < cfg.min_cluster_size:
            continue
        final[members] = len(out_centers)
        out_centers.append(p)
        out_spread.append(float(np.sqrt(np.mean(dist ** 2))))
    centers_rel = np.array(out_centers).reshape(-1, 2)
    labels_in = np.empty(n, dtype=int)
    labels_in[order] = final
    return anchor + centers_rel, labels_in, np.array(out_spread)


def cluster_candidates(candidates, config: ClusterConfig = ClusterConfig(),
                       bandwidth: float | None = None, frame_id: int = 0) -> list:
    """Fuse ``LocalizationCandidate`` objects (or raw points) into ``MBLocation``s."""
    h = bandwidth if bandwidth is not None else config.bandwidth
    if h is None or not h > 0:
        raise ValueError("a positive bandwidth is required")
    if len(candidates) == 0:
        return []
    if hasattr(candidates[0], "position"):
        pts = np.array([c.position for c in candidates])
        w = condition_weights([c.condition for c in candidates], config.condition_ref)
    else:
        pts = np.asarray(candidates, dtype=float).reshape(-1, 2)
        w = None
    centers, labels, spreads = mean_shift_modes(pts, w, config, h)
    out = [MBLocation(c, int(np.sum(labels == j)), float(s), frame_id)
           for j, (c, s) in enumerate(zip(centers, spreads))]
    out.sort(key=lambda m: (m.position[0], m.position[1]))
    return out


class MeanShiftFusion(ClusterMixin, BaseEstimator):
    """Estimator wrapper around the weighted mean-shift fusion.

    Parameters
    ----------
    bandwidth : float
        Gaussian kernel bandwidth in meters (a quarter wavelength in the
        localization pipeline).
    min_cluster_size : int
        Clusters with fewer members are discarded; their points get label -1.
    """

    def __init__(self, bandwidth=4.928e-5, min_cluster_size=2, tol=1e-3, max_iter=100,
                 merge_radius=0.5, seed_cap=10_000):
        self.bandwidth = bandwidth
        self.min_cluster_size = min_cluster_size
        self.tol = tol
        self.max_iter = max_iter
        self.merge_radius = merge_radius
        self.seed_cap = seed_cap

    def _config(self):
        return ClusterConfig(self.bandwidth, self.min_cluster_size, self.tol, self.max_iter,
                             self.merge_radius, self.seed_cap)

    def fit(self, X, y=None, sample_weight=None):
        X = check_array(X, ensure_min_samples=0)
        if X.shape[1] != 2:
            raise ValueError("expected 2-D points")
        centers, labels, spreads = mean_shift_modes(X, sample_weight, self._config(), self.bandwidth)
        self.cluster_centers_ = centers
        self.labels_ = labels
        self.spreads_ = spreads
        self.support_ = np.array([np.sum(labels == j) for j in range(len(centers))], dtype=int)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X)
        if len(self.cluster_centers_) == 0:
            return np.full(len(X), -1)
        d = np.hypot(*(X[:, None, :] - self.cluster_centers_[None]).transpose(2, 0, 1))
        return np.argmin(d, axis=1)
