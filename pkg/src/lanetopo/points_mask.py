"""Points-guided instance masks and points-mask fusion.

Each centerline query is turned into a mask query (its embedding plus an
encoding of its predicted points), a dot-product mask head produces H x W
logits, and a soft-argmax readout regresses one sub-cell point per column
(and, for near-vertical lanes, one per row). Valid readout points are fused
back into the regressed polyline by outlier filtering, resampling, and
index-wise averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bev import BevGrid, GridSpec, mlp_forward, sigmoid, softmax
from .geometry import (
    PointSet2,
    Polyline,
    filter_outliers,
    resample_points_2d,
)
from .weights import MaskHeadWeights

AXIS_COLUMNS = "columns"
AXIS_ROWS = "rows"


@dataclass
class MaskPointReadout:
    """One point per column (or row): sub-cell coordinate, existence, direction.

    ``coords[j]`` is the fractional row index for column j (columns axis) or
    the fractional column index for row j (rows axis). ``direction`` >= 0.5
    means the point order follows increasing column (resp. row) index.
    """

    axis: str
    coords: np.ndarray
    existence: np.ndarray
    direction: float

    def __post_init__(self):
        if self.axis not in (AXIS_COLUMNS, AXIS_ROWS):
            raise ValueError(f"unknown axis {self.axis!r}")
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1)
        self.existence = np.asarray(self.existence, dtype=np.float64).reshape(-1)
        if self.coords.shape != self.existence.shape:
            raise ValueError("coords and existence must have the same length")

    def valid_count(self, threshold: float = 0.5) -> int:
        return int(np.sum(self.existence > threshold))


def encode_mask_query(q: np.ndarray, l: Polyline, w: MaskHeadWeights) -> np.ndarray:
    """Mask query for one instance: positional encoding of its K points plus
    an encoding of the instance query."""
    per_point = mlp_forward(w.point_mlp, l.pts)  # (k, c)
    positional = mlp_forward(w.concat_mlp, per_point.reshape(-1))
    return positional + mlp_forward(w.query_mlp, np.asarray(q, dtype=np.float64))


def generate_mask(b: BevGrid, q_prime: np.ndarray) -> np.ndarray:
    """Dot-product mask head: per-cell logit = cell feature . mask query."""
    q_prime = np.asarray(q_prime, dtype=np.float64)
    if q_prime.shape != (b.c,):
        raise ValueError(f"mask query must be ({b.c},), got {q_prime.shape}")
    return b.data @ q_prime


def sample_mask_points(m: np.ndarray, axis: str) -> np.ndarray:
    """Soft-argmax one point per column (or per row) of a mask logit map.

    Columns axis: coordinate j is sum_r r * softmax(m[:, j]), giving W values
    in [0, H-1]. Rows axis is the symmetric per-row readout.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("mask must be 2D")
    h, w = m.shape
    if axis == AXIS_COLUMNS:
        if h < 2:
            raise ValueError("columns readout needs at least 2 rows")
        probs = softmax(m, axis=0)
        return np.arange(h, dtype=np.float64) @ probs
    if axis == AXIS_ROWS:
        if w < 2:
            raise ValueError("rows readout needs at least 2 columns")
        probs = softmax(m, axis=1)
        return probs @ np.arange(w, dtype=np.float64)
    raise ValueError(f"unknown axis {axis!r}")


def predict_existence(m: np.ndarray, phi1, axis: str) -> np.ndarray:
    """Per-column (or per-row) existence probabilities from the flattened mask."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    expected = w if axis == AXIS_COLUMNS else h
    if phi1.in_dim != h * w:
        raise ValueError(f"existence head expects input dim {h * w}, got {phi1.in_dim}")
    if phi1.out_dim != expected:
        raise ValueError(f"existence head for {axis} must output {expected} values")
    return sigmoid(mlp_forward(phi1, m.reshape(-1)))


def predict_direction(q_prime: np.ndarray, phi2) -> float:
    """Probability that the point order follows the increasing index direction."""
    out = mlp_forward(phi2, np.asarray(q_prime, dtype=np.float64))
    return float(sigmoid(out.reshape(-1)[0]))


def select_point_set(
    col: MaskPointReadout,
    row: MaskPointReadout,
    validity_threshold: float = 0.5,
) -> MaskPointReadout:
    """Pick the readout with more valid points; ties go to the columns readout."""
    if not (0.0 < validity_threshold < 1.0):
        raise ValueError("validity_threshold must lie in (0, 1)")
    if row.valid_count(validity_threshold) > col.valid_count(validity_threshold):
        return row
    return col


def readout_to_metric_points(readout: MaskPointReadout, grid: GridSpec) -> np.ndarray:
    """Convert a readout to metric (x, y) points in index order."""
    n = readout.coords.shape[0]
    idx = np.arange(n, dtype=np.float64)
    if readout.axis == AXIS_COLUMNS:
        rc = np.stack([readout.coords, idx], axis=-1)
    else:
        rc = np.stack([idx, readout.coords], axis=-1)
    return grid.cell_to_metric(rc)


def fuse_points(
    detected: Polyline,
    readout: MaskPointReadout,
    grid: GridSpec,
    k: int,
    outlier_threshold: float = 1.5,
    validity_threshold: float = 0.5,
) -> Polyline:
    """Refine detected points by averaging with resampled valid mask points.

    Valid mask points are converted to metric coordinates, reversed when the
    direction probability is below 0.5, outlier-filtered, and resampled to K
    points; refined (x, y) is the index-wise mean with the detected points and
    z comes from the detected polyline. Degenerate readouts (fewer than two
    surviving points) fall back to the detected polyline unchanged.
    """
    if len(detected) != k:
        raise ValueError(f"detected polyline must have exactly {k} points")
    valid = readout.existence > validity_threshold
    if int(valid.sum()) < 2:
        return detected
    metric = readout_to_metric_points(readout, grid)[valid]
    if readout.direction < 0.5:
        metric = metric[::-1]
    kept = filter_outliers(
        PointSet2(metric, np.ones(len(metric), dtype=bool)), outlier_threshold
    )
    survivors = kept.valid_points()
    if survivors.shape[0] < 2:
        return detected
    mask_pts = resample_points_2d(survivors, k)
    refined = detected.pts.copy()
    refined[:, :2] = 0.5 * (refined[:, :2] + mask_pts)
    return Polyline(refined)
