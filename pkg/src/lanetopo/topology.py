"""Lane-lane connectivity prediction from final queries and geometry.

Entry (i, j) of the topology matrix is the probability that centerline i's
end connects to centerline j's start.
"""

from __future__ import annotations

import numpy as np

from .bev import MlpWeights, mlp_forward, sigmoid


def enhance_queries(
    q: np.ndarray,
    lines: np.ndarray,
    psi1: MlpWeights,
    psi2: MlpWeights,
) -> np.ndarray:
    """Geometry-aware embeddings: E_i = psi1(q_i) + psi2(flatten(line_i)).

    ``lines`` is (n, k, 3); the k points are flattened in fixed point order.
    """
    q = np.asarray(q, dtype=np.float64)
    lines = np.asarray(lines, dtype=np.float64)
    if lines.ndim != 3 or lines.shape[0] != q.shape[0] or lines.shape[2] != 3:
        raise ValueError(f"lines must be (n, k, 3) with one polyline per query, got {lines.shape}")
    return mlp_forward(psi1, q) + mlp_forward(psi2, lines.reshape(lines.shape[0], -1))


def predict_topology(e: np.ndarray, classifier: MlpWeights) -> np.ndarray:
    """Pairwise adjacency probabilities from concatenated embedding pairs.

    Pair (i, j) feeds concat(E_i, E_j) to the classifier; the sigmoid output
    is the probability that lane i flows into lane j.
    """
    e = np.asarray(e, dtype=np.float64)
    n, c = e.shape
    if classifier.in_dim != 2 * c:
        raise ValueError(f"classifier input dim must be {2 * c}, got {classifier.in_dim}")
    src = np.repeat(e, n, axis=0)
    dst = np.tile(e, (n, 1))
    logits = mlp_forward(classifier, np.concatenate([src, dst], axis=1)).reshape(n, n)
    return sigmoid(logits)
