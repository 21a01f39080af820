"""Hybrid-attention transformer decoder for centerline instance queries.

Each decoder layer runs masked cross-attention over the BEV cells, deformable
cross-attention at learned sampling points, block self-attention that keeps
real queries blind to virtual ones, and a feed-forward block; every sublayer
is residual with post layer normalization. Two MLP heads map final queries to
K-point polylines and detection probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bev import (
    BevGrid,
    LayerNormWeights,
    MlpWeights,
    bilinear_sample_batch,
    layer_norm,
    mlp_forward,
    sigmoid,
    softmax,
)
from .config import PipelineConfig
from .geometry import Polyline
from .points_mask import encode_mask_query, generate_mask
from .weights import DeformableWeights, ModelWeights

NEG_INF = -np.inf


@dataclass
class QuerySet:
    """Separate learnable pools of real and virtual instance queries."""

    real: np.ndarray
    virtual: np.ndarray

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=np.float64)
        self.virtual = np.asarray(self.virtual, dtype=np.float64).reshape(-1, self.real.shape[1])
        if not (np.all(np.isfinite(self.real)) and np.all(np.isfinite(self.virtual))):
            raise ValueError("queries must be finite")

    @property
    def n_real(self) -> int:
        return self.real.shape[0]

    @property
    def n_virtual(self) -> int:
        return self.virtual.shape[0]

    def concat(self) -> np.ndarray:
        return np.concatenate([self.real, self.virtual], axis=0)


@dataclass
class CenterlinePrediction:
    """One decoder output slot: geometry, confidence, category, embedding."""

    points: Polyline
    score: float
    is_real: bool
    query: np.ndarray


def masked_cross_attention(
    q: np.ndarray,
    b: BevGrid,
    m: np.ndarray,
    ln: LayerNormWeights | None = None,
    return_weights: bool = False,
):
    """Attend from each query to the BEV cells allowed by its mask row.

    Scores are ``q @ cells^T + m`` with mask entries in {0, -inf}; the
    attention output is added residually and layer-normalized.
    """
    cells = b.flat()
    if q.shape[1] != cells.shape[1]:
        raise ValueError("query and BEV channel dimensions differ")
    if m.shape != (q.shape[0], cells.shape[0]):
        raise ValueError(f"mask must be (n_queries, h*w), got {m.shape}")
    weights = softmax(q @ cells.T + m, axis=-1)
    out = q + weights @ cells
    if ln is not None:
        out = layer_norm(out, ln)
    if return_weights:
        return out, weights
    return out


def rvs_self_attention(
    qr: np.ndarray,
    qv: np.ndarray,
    ln: LayerNormWeights | None = None,
    return_weights: bool = False,
):
    """Block self-attention: real rows attend to real columns only, virtual rows to all.

    Scores are scaled by 1/sqrt(c). The real block is computed without ever
    touching the virtual queries, so real outputs are structurally independent
    of them.
    """
    n_r, c = qr.shape
    n_v = qv.shape[0]
    scale = 1.0 / np.sqrt(c)
    if n_r > 0:
        w_r = softmax(qr @ qr.T * scale, axis=-1)
        out_r = qr + w_r @ qr
    else:
        w_r = np.zeros((0, n_r))
        out_r = qr.copy()
    if n_v > 0:
        vcat = np.concatenate([qr, qv], axis=0)
        w_v = softmax(np.concatenate([qv @ qr.T, qv @ qv.T], axis=1) * scale, axis=-1)
        out_v = qv + w_v @ vcat
    else:
        w_v = np.zeros((0, n_r + n_v))
        out_v = qv.copy()
    if ln is not None:
        out_r = layer_norm(out_r, ln)
        out_v = layer_norm(out_v, ln)
    if return_weights:
        full = np.zeros((n_r + n_v, n_r + n_v))
        full[:n_r, :n_r] = w_r
        full[n_r:, :] = w_v
        return out_r, out_v, full
    return out_r, out_v


def self_attention(q: np.ndarray, ln: LayerNormWeights | None = None) -> np.ndarray:
    """Plain scaled-dot-product self-attention over all queries."""
    scale = 1.0 / np.sqrt(q.shape[1])
    out = q + softmax(q @ q.T * scale, axis=-1) @ q
    if ln is not None:
        out = layer_norm(out, ln)
    return out


def _deformable_block(
    q: np.ndarray, b: BevGrid, refs: np.ndarray, w: DeformableWeights
) -> np.ndarray:
    n, c = q.shape
    heads, points = w.heads, w.points
    hd = c // heads
    offsets = np.einsum("hoc,nc->nho", w.w_offset, q) + w.b_offset[None]
    offsets = offsets.reshape(n, heads, points, 2)
    attn = softmax(np.einsum("hpc,nc->nhp", w.w_attn, q) + w.b_attn[None], axis=-1)
    locs = refs[:, None, None, :] + offsets
    samples = bilinear_sample_batch(b, locs)  # (n, heads, points, c)
    per_head = samples.reshape(n, heads, points, heads, hd)
    idx = np.arange(heads)
    sliced = per_head[:, idx, :, idx, :]  # (heads, n, points, hd)
    head_out = np.einsum("hnp,hnpd->nhd", attn.transpose(1, 0, 2), sliced)
    return head_out.reshape(n, c) @ w.w_out.T + w.b_out


def deformable_attention_core(
    q: np.ndarray,
    b: BevGrid,
    refs: np.ndarray,
    w: DeformableWeights,
    block: int = 4096,
) -> np.ndarray:
    """Pre-residual deformable attention contribution for each query.

    Per head, the query predicts P (row, col) offsets around its reference
    point and a softmax-normalized weight per sampling point; the head reads
    its channel slice of the bilinear samples. Out-of-grid samples are zero.
    Queries are processed in blocks to bound the sampling buffers.
    """
    n, c = q.shape
    if c % w.heads != 0:
        raise ValueError("channels must divide evenly across heads")
    refs = np.asarray(refs, dtype=np.float64).reshape(n, 2)
    if n <= block:
        return _deformable_block(q, b, refs, w)
    out = np.empty_like(q)
    for start in range(0, n, block):
        stop = min(start + block, n)
        out[start:stop] = _deformable_block(q[start:stop], b, refs[start:stop], w)
    return out


def deformable_cross_attention(
    q: np.ndarray,
    b: BevGrid,
    refs: np.ndarray,
    w: DeformableWeights,
    ln: LayerNormWeights | None = None,
) -> np.ndarray:
    """Deformable attention with residual add and layer normalization."""
    out = q + deformable_attention_core(q, b, refs, w)
    if ln is not None:
        out = layer_norm(out, ln)
    return out


def attention_mask_from_instance_masks(
    mask_logits: np.ndarray, threshold: float = 0.5
) -> np.ndarray:
    """Build {0, -inf} attention masks from per-query instance mask logits.

    Cells with sigmoid(logit) >= threshold stay attendable; a row that would
    be fully masked falls back to attending everywhere.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    logits = np.asarray(mask_logits, dtype=np.float64)
    n = logits.shape[0]
    probs = sigmoid(logits).reshape(n, -1)
    m = np.where(probs >= threshold, 0.0, NEG_INF)
    fully_masked = ~np.any(m == 0.0, axis=1)
    m[fully_masked] = 0.0
    return m


def points_from_queries(
    q: np.ndarray, points_head: MlpWeights, cfg: PipelineConfig
) -> np.ndarray:
    """Decode each query into K metric points inside the configured BEV range."""
    grid = cfg.grid
    u = sigmoid(mlp_forward(points_head, q)).reshape(q.shape[0], cfg.k, 3)
    pts = np.empty_like(u)
    pts[..., 0] = grid.x_min + u[..., 0] * (grid.x_max - grid.x_min)
    pts[..., 1] = grid.y_min + u[..., 1] * (grid.y_max - grid.y_min)
    pts[..., 2] = cfg.z_min + u[..., 2] * (cfg.z_max - cfg.z_min)
    return pts


def instance_mask_logits(
    q: np.ndarray,
    pts: np.ndarray,
    b: BevGrid,
    weights: ModelWeights,
    points_guided: bool,
) -> np.ndarray:
    """Mask logits for every query, points-guided or from the query alone."""
    masks = np.empty((q.shape[0], b.h, b.w))
    for i in range(q.shape[0]):
        if points_guided:
            q_prime = encode_mask_query(q[i], Polyline(pts[i]), weights.mask_head)
        else:
            q_prime = mlp_forward(weights.mask_head.query_mlp, q[i])
        masks[i] = generate_mask(b, q_prime)
    return masks


def decoder_forward(
    qs: QuerySet,
    b: BevGrid,
    weights: ModelWeights,
    cfg: PipelineConfig,
) -> tuple[list[CenterlinePrediction], QuerySet]:
    """Run the full decoder stack and detection heads.

    Layer 0 attends everywhere in the masked branch and uses the learnable
    initial reference points; later layers take masks and references from the
    previous layer's predicted geometry. Only the final layer's predictions
    are exported.
    """
    dec = weights.decoder
    if len(dec.layers) != cfg.layers:
        raise ValueError(
            f"weights carry {len(dec.layers)} decoder layers, config expects {cfg.layers}"
        )
    qr, qv = qs.real.copy(), qs.virtual.copy()
    n_r = qr.shape[0]
    hw = b.h * b.w
    refs = sigmoid(dec.init_ref_logits) * np.array([b.h - 1, b.w - 1], dtype=np.float64)
    attn_mask = np.zeros((qr.shape[0] + qv.shape[0], hw))
    q = None
    for li, lw in enumerate(dec.layers):
        q = np.concatenate([qr, qv], axis=0)
        if cfg.hybrid_attention:
            q = masked_cross_attention(q, b, attn_mask, lw.masked_ln)
        q = deformable_cross_attention(q, b, refs, lw.deform, lw.deform_ln)
        qr, qv = q[:n_r], q[n_r:]
        if cfg.rvs_self_attention:
            qr, qv = rvs_self_attention(qr, qv, lw.self_ln)
        else:
            q = self_attention(np.concatenate([qr, qv], axis=0), lw.self_ln)
            qr, qv = q[:n_r], q[n_r:]
        q = np.concatenate([qr, qv], axis=0)
        q = layer_norm(q + mlp_forward(lw.ffn, q), lw.ffn_ln)
        qr, qv = q[:n_r], q[n_r:]
        pts = points_from_queries(q, dec.points_head, cfg)
        if li < cfg.layers - 1:
            centroids = pts[:, :, :2].mean(axis=1)
            refs = b.spec.metric_to_cell(centroids)
            mask_logits = instance_mask_logits(q, pts, b, weights, cfg.pgm)
            attn_mask = attention_mask_from_instance_masks(mask_logits, cfg.mask_threshold)
    scores = sigmoid(mlp_forward(dec.score_head, q))[:, 0]
    preds = [
        CenterlinePrediction(
            points=Polyline(pts[i]),
            score=float(scores[i]),
            is_real=i < n_r,
            query=q[i].copy(),
        )
        for i in range(q.shape[0])
    ]
    return preds, QuerySet(qr, qv)
