"""Exact Euclidean distance kernels shared by bank building and scoring.

Candidate neighbors are found with the blocked ||a||^2 + ||b||^2 - 2ab
expansion in float64, then the returned distances are recomputed as direct
sums of squared differences (float64 accumulation) so that results match a
straightforward per-pair computation: identical vectors give exactly 0.
"""

from __future__ import annotations

import numpy as np

# keep per-block scratch around 64 MB of float64
_BLOCK_BUDGET = 8_000_000


def _block_rows(n_cols: int) -> int:
    return max(1, _BLOCK_BUDGET // max(1, n_cols))


def exact_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distances between paired rows of a and b."""
    diff = a.astype(np.float64) - b.astype(np.float64)
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


def knn_smallest(data: np.ndarray, k: int) -> np.ndarray:
    """The k smallest self-excluded neighbor distances for every row.

    Returns an (n, k) float64 matrix with each row sorted ascending.
    """
    x = np.ascontiguousarray(data, dtype=np.float64)
    n = x.shape[0]
    row_sq = np.einsum("ij,ij->i", x, x)
    out = np.empty((n, k), dtype=np.float64)
    step = _block_rows(n)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        block = x[lo:hi]
        sq = row_sq[lo:hi, None] + row_sq[None, :] - 2.0 * (block @ x.T)
        sq[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        idx = np.argpartition(sq, k - 1, axis=1)[:, :k]
        cand = exact_distances(x[idx], block[:, None, :])
        cand.sort(axis=1)
        out[lo:hi] = cand
    return out


def nearest_distance(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Distance from every query row to its nearest prototype row."""
    q = np.ascontiguousarray(queries, dtype=np.float64)
    p = np.ascontiguousarray(prototypes, dtype=np.float64)
    q_sq = np.einsum("ij,ij->i", q, q)
    p_sq = np.einsum("ij,ij->i", p, p)
    out = np.empty(q.shape[0], dtype=np.float64)
    step = _block_rows(p.shape[0])
    for lo in range(0, q.shape[0], step):
        hi = min(q.shape[0], lo + step)
        sq = q_sq[lo:hi, None] + p_sq[None, :] - 2.0 * (q[lo:hi] @ p.T)
        best = np.argmin(sq, axis=1)
        out[lo:hi] = exact_distances(q[lo:hi], p[best])
    return out
