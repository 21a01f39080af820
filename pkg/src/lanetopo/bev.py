"""Dense numeric kernel for BEV feature grids.

Grids, small MLPs, stabilized softmax, bilinear sampling, 2D sinusoidal
position encodings, layer normalization, and a central-difference gradient
harness. All math is 64-bit floating point and deterministic; there is no
autodiff and no GPU path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid  # noqa: F401  (re-exported)

LN_EPS = 1e-5


@dataclass(frozen=True)
class GridSpec:
    """Metric <-> cell transform for an H x W BEV grid.

    Cell (row, col) is centered at ``(x_min + (col + 0.5) * resolution,
    y_min + (row + 0.5) * resolution)``: column index increases with x
    (driving direction), row index with y.
    """

    h: int
    w: int
    x_min: float
    y_min: float
    resolution: float

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError("grid must have at least one cell per axis")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def x_max(self) -> float:
        return self.x_min + self.w * self.resolution

    @property
    def y_max(self) -> float:
        return self.y_min + self.h * self.resolution

    @classmethod
    def default(cls) -> GridSpec:
        return cls(h=100, w=200, x_min=-50.0, y_min=-25.0, resolution=0.5)

    def metric_to_cell(self, xy: np.ndarray) -> np.ndarray:
        """Map metric (x, y) to fractional (row, col); shapes (..., 2)."""
        xy = np.asarray(xy, dtype=np.float64)
        col = (xy[..., 0] - self.x_min) / self.resolution - 0.5
        row = (xy[..., 1] - self.y_min) / self.resolution - 0.5
        return np.stack([row, col], axis=-1)

    def cell_to_metric(self, rc: np.ndarray) -> np.ndarray:
        """Map fractional (row, col) to metric (x, y); shapes (..., 2)."""
        rc = np.asarray(rc, dtype=np.float64)
        x = self.x_min + (rc[..., 1] + 0.5) * self.resolution
        y = self.y_min + (rc[..., 0] + 0.5) * self.resolution
        return np.stack([x, y], axis=-1)


@dataclass
class BevGrid:
    """H x W x C feature map tied to a metric transform."""

    data: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"grid data must be (h, w, c), got {data.shape}")
        if data.shape[:2] != (self.spec.h, self.spec.w):
            raise ValueError(
                f"data shape {data.shape[:2]} does not match grid {self.spec.h}x{self.spec.w}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("grid features must be finite")
        self.data = data

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        """Cells flattened row-major to (h * w, c)."""
        return self.data.reshape(self.h * self.w, self.c)


_ACTIVATIONS = ("relu", "none")


@dataclass
class MlpWeights:
    """Sequential affine layers: list of (weight (out, in), bias (out,), activation)."""

    layers: list[tuple[np.ndarray, np.ndarray, str]]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        checked = []
        prev_out = None
        for w, b, act in self.layers:
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError("layer weight must be (out, in) with bias (out,)")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError("consecutive layer dimensions must chain")
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("MLP weights must be finite")
            prev_out = w.shape[0]
            checked.append((w, b, act))
        self.layers = checked

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]


def mlp_forward(w: MlpWeights, x: np.ndarray) -> np.ndarray:
    """Apply the MLP to a feature vector or a batch with features last."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != MLP input dim {w.in_dim}")
    for mat, bias, act in w.layers:
        x = x @ mat.T + bias
        if act == "relu":
            x = np.maximum(x, 0.0)
    return x


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stabilized softmax; -inf entries act as mask sentinels and map to 0.

    Raises on any fully masked (all -inf) slice.
    """
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ValueError("softmax over a fully masked row")
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class LayerNormWeights:
    """Per-channel affine parameters for layer normalization."""

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(-1)
        if self.scale.shape != self.shift.shape:
            raise ValueError("scale and shift must have the same length")

    @classmethod
    def identity(cls, c: int) -> LayerNormWeights:
        return cls(np.ones(c), np.zeros(c))


def layer_norm(x: np.ndarray, ln: LayerNormWeights, eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the last axis, then apply the affine parameters."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * ln.scale + ln.shift


def bilinear_sample_batch(g: BevGrid, locs: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of grid features at fractional (row, col) locations.

    ``locs`` has shape (..., 2); the result has shape (..., c). Locations
    outside [0, h-1] x [0, w-1] return the zero vector (zero padding).
    """
    locs = np.asarray(locs, dtype=np.float64)
    r = locs[..., 0]
    c = locs[..., 1]
    h, w = g.h, g.w
    inside = (r >= 0) & (r <= h - 1) & (c >= 0) & (c <= w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    r0c = np.clip(r0, 0, h - 1)
    r1c = np.clip(r0 + 1, 0, h - 1)
    c0c = np.clip(c0, 0, w - 1)
    c1c = np.clip(c0 + 1, 0, w - 1)
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out = (
        w00[..., None] * g.data[r0c, c0c]
        + w01[..., None] * g.data[r0c, c1c]
        + w10[..., None] * g.data[r1c, c0c]
        + w11[..., None] * g.data[r1c, c1c]
    )
    out[~inside] = 0.0
    return out


def bilinear_sample(g: BevGrid, loc: tuple[float, float] | np.ndarray) -> np.ndarray:
    """Single-location convenience wrapper around :func:`bilinear_sample_batch`."""
    return bilinear_sample_batch(g, np.asarray(loc, dtype=np.float64))


def sinusoidal_pe_2d(h: int, w: int, c: int, spec: GridSpec | None = None) -> BevGrid:
    """Deterministic 2D sinusoidal position encoding grid.

    The first c/2 channels encode column position, the last c/2 row position.
    Each half holds sin/cos pairs over geometrically spaced frequencies
    (base 10000). Positions are scaled to [0, 2*pi*(n-1)/n) per axis so the
    base-frequency pair stays injective for any grid size.
    """
    if c % 4 != 0:
        raise ValueError("channel count must be divisible by 4")
    if spec is None:
        spec = GridSpec(h=h, w=w, x_min=0.0, y_min=0.0, resolution=1.0)
    elif (spec.h, spec.w) != (h, w):
        raise ValueError("spec dimensions must match h, w")
    quarter = c // 4
    div = np.power(10000.0, np.arange(quarter) / quarter)
    u_col = 2.0 * np.pi * np.arange(w) / w
    u_row = 2.0 * np.pi * np.arange(h) / h
    data = np.zeros((h, w, c), dtype=np.float64)
    col_phase = u_col[:, None] / div[None, :]
    row_phase = u_row[:, None] / div[None, :]
    half = c // 2
    data[:, :, 0:half:2] = np.sin(col_phase)[None, :, :]
    data[:, :, 1:half:2] = np.cos(col_phase)[None, :, :]
    data[:, :, half::2] = np.sin(row_phase)[:, None, :]
    data[:, :, half + 1 :: 2] = np.cos(row_phase)[:, None, :]
    return BevGrid(data, spec)


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        step = np.zeros_like(xf)
        step[i] = eps
        hi = f((xf + step).reshape(x.shape))
        lo = f((xf - step).reshape(x.shape))
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad
