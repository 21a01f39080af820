"""SD map rasterization and BEV feature augmentation.

Road-level SD map polylines are traced into the BEV grid with a supercover
line rasterization, each touched cell taking the instance's semantic type
embedding (first instance wins on overlap, all other cells take the default
embedding). A small pre-norm transformer decoder then lets the sensor BEV
features attend into the semantic-plus-positional SD grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bev import BevGrid, GridSpec, layer_norm, mlp_forward
from .decoder import deformable_attention_core
from .geometry import Polyline
from .weights import SdInteractWeights


@dataclass(frozen=True)
class SdMapInstance:
    """One SD map element: a road-level polyline and its semantic type id."""

    polyline: Polyline
    semantic_type: int

    def __post_init__(self):
        if self.semantic_type < 1:
            raise ValueError("semantic type ids start at 1")


@dataclass
class SemanticEmbeddingTable:
    """Row 0 is the default (unoccupied) embedding; rows 1..n are the types."""

    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 2:
            raise ValueError("table needs a default row plus at least one type row")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings must be finite")
        self.embeddings = emb

    @property
    def n_types(self) -> int:
        return self.embeddings.shape[0] - 1


def _segment_cells(u0: float, v0: float, u1: float, v1: float) -> list[tuple[int, int]]:
    """All (row, col) cells a segment passes through, in corner coordinates.

    Cell (i, j) spans [j, j+1) x [i, i+1). The segment is cut at every integer
    u and v crossing; each piece is assigned to the cell containing its
    midpoint.
    """
    ts = [0.0, 1.0]
    du, dv = u1 - u0, v1 - v0
    if du != 0.0:
        lo, hi = sorted((u0, u1))
        for kk in range(int(np.ceil(lo)), int(np.floor(hi)) + 1):
            t = (kk - u0) / du
            if 0.0 < t < 1.0:
                ts.append(t)
    if dv != 0.0:
        lo, hi = sorted((v0, v1))
        for kk in range(int(np.ceil(lo)), int(np.floor(hi)) + 1):
            t = (kk - v0) / dv
            if 0.0 < t < 1.0:
                ts.append(t)
    ts = sorted(set(ts))
    cells = []
    for a, bnd in zip(ts[:-1], ts[1:]):
        tm = 0.5 * (a + bnd)
        um = u0 + tm * du
        vm = v0 + tm * dv
        cells.append((int(np.floor(vm)), int(np.floor(um))))
    if not cells:  # zero-length segment
        cells.append((int(np.floor(v0)), int(np.floor(u0))))
    return cells


def supercover_cells(poly: Polyline, spec: GridSpec) -> np.ndarray:
    """Grid cells traversed by the polyline, deduplicated in traversal order.

    Cells outside the grid are dropped; a polyline entirely outside the grid
    yields an empty array.
    """
    res = spec.resolution
    u = (poly.pts[:, 0] - spec.x_min) / res
    v = (poly.pts[:, 1] - spec.y_min) / res
    seen: set[tuple[int, int]] = set()
    out: list[tuple[int, int]] = []
    for i in range(len(poly) - 1):
        for r, c in _segment_cells(u[i], v[i], u[i + 1], v[i + 1]):
            if 0 <= r < spec.h and 0 <= c < spec.w and (r, c) not in seen:
                seen.add((r, c))
                out.append((r, c))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def rasterize_sdmap(
    instances: list[SdMapInstance],
    spec: GridSpec,
    table: SemanticEmbeddingTable,
) -> BevGrid:
    """Semantic embedding grid: traversed cells take their instance's type
    embedding (lowest instance index wins), the rest take the default."""
    claim = np.zeros((spec.h, spec.w), dtype=np.int64)
    for inst in instances:
        if inst.semantic_type > table.n_types:
            raise ValueError(
                f"semantic type {inst.semantic_type} outside table of {table.n_types} types"
            )
        cells = supercover_cells(inst.polyline, spec)
        for r, c in cells:
            if claim[r, c] == 0:
                claim[r, c] = inst.semantic_type
    return BevGrid(table.embeddings[claim], spec)


def sd_interact(
    b: BevGrid,
    e_s: BevGrid,
    e_p: BevGrid,
    weights: SdInteractWeights,
) -> BevGrid:
    """Augment BEV features by attending into the SD semantic grid.

    Each layer applies deformable self-attention over the BEV cells, then
    deformable cross-attention into e_s + e_p, then a feed-forward block.
    Sublayers are pre-norm residual, so zeroing every learned projection
    leaves the input exactly unchanged. Reference points are the cells' own
    integer coordinates.
    """
    if not (b.data.shape == e_s.data.shape == e_p.data.shape):
        raise ValueError("BEV, semantic, and positional grids must share h, w, c")
    h, w = b.h, b.w
    sd_grid = BevGrid(e_s.data + e_p.data, b.spec)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    refs = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=-1).astype(np.float64)
    x = b.flat().copy()
    for layer in weights.layers:
        self_grid = BevGrid(x.reshape(h, w, b.c), b.spec)
        x = x + deformable_attention_core(
            layer_norm(x, layer.self_ln), self_grid, refs, layer.self_deform
        )
        x = x + deformable_attention_core(
            layer_norm(x, layer.cross_ln), sd_grid, refs, layer.cross_deform
        )
        x = x + mlp_forward(layer.ffn, layer_norm(x, layer.ffn_ln))
    return BevGrid(x.reshape(h, w, b.c), b.spec)
