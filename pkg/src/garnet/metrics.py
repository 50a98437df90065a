"""Evaluation metrics on binarized occupancy grids."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError
from .tensor import Tensor

THRESHOLD = 0.3
FSCORE_TAU = 0.01


def binarize(p, t: float = THRESHOLD) -> np.ndarray:
    """Occupied iff ``p > t`` (strict)."""
    if not 0.0 < t < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {t}")
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    return arr > t


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"grid shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """|a & b| / |a | b|; 1.0 when both grids are empty."""
    a, b = _same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def surface_cells(grid) -> np.ndarray:
    """Occupied cells with at least one empty 6-neighbour; outside the grid counts as empty."""
    g = np.asarray(grid, dtype=bool)
    padded = np.pad(g, 1, constant_values=False)
    inner = (slice(1, -1),) * g.ndim
    all_full = np.ones_like(g)
    for ax in range(g.ndim):
        for shift in (-1, 1):
            all_full &= np.roll(padded, shift, axis=ax)[inner]
    return g & ~all_full


def surface_points(grid) -> np.ndarray:
    """Surface cell centres mapped into the unit cube, one row per cell."""
    g = np.asarray(grid, dtype=bool)
    idx = np.argwhere(surface_cells(g))
    return (idx + 0.5) / np.array(g.shape, dtype=np.float64)


def _fraction_within(src: np.ndarray, dst: np.ndarray, tau: float) -> float:
    if len(src) == 0:
        return 0.0
    d, _ = cKDTree(dst).query(src, k=1)
    return float(np.mean(d <= tau))


def fscore(a, b, tau: float = FSCORE_TAU) -> float:
    """Surface F-score: harmonic mean of the fractions of each surface within ``tau`` of the other."""
    a, b = _same_shape(a, b)
    pa, pb = surface_points(a), surface_points(b)
    if len(pa) == 0 and len(pb) == 0:
        return 1.0
    if len(pa) == 0 or len(pb) == 0:
        return 0.0
    precision = _fraction_within(pa, pb, tau)
    recall = _fraction_within(pb, pa, tau)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def fscore_1pct(a, b) -> float:
    return fscore(a, b, FSCORE_TAU)


def format_metric_record(object_id: str, n_views: int, iou_value: float, fscore_value: float) -> str:
    return f"{object_id}, {n_views}, {iou_value:.6f}, {fscore_value:.6f}"


def parse_metric_record(line: str) -> tuple[str, int, float, float]:
    oid, n, i, f = (s.strip() for s in line.split(","))
    return oid, int(n), float(i), float(f)
