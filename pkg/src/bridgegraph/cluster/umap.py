"""Two-dimensional UMAP embedding.

The high-dimensional side is an exact k-nearest-neighbour fuzzy graph with a
per-point bandwidth; the low-dimensional side is optimised by edge-sampled SGD
with negative sampling.  The sampling schedule depends only on the graph, so
it is computed in numpy and every random index is drawn up front from a seeded
generator; the numba kernel only moves points.  That keeps runs bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
from scipy import sparse
from scipy.optimize import curve_fit
from scipy.spatial.distance import cdist

from .params import UmapParams

SMOOTH_K_TOLERANCE = 1e-5
SIGMA_FLOOR = 1e-8
BISECTION_STEPS = 64
GRAD_CLIP = 4.0


@dataclass
class FuzzyGraph:
    knn_index: np.ndarray  # n x k, neighbours excluding self
    knn_dist: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray
    directed: sparse.csr_matrix
    graph: sparse.csr_matrix  # symmetric fuzzy union

    @property
    def n(self) -> int:
        return len(self.rho)


def exact_knn(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    d = cdist(x, x)
    np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def smooth_knn(knn_dist: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """rho = nearest non-zero distance; sigma solves sum(exp(-(d - rho)/sigma)) = log2(k)."""
    target = math.log2(k)
    n = len(knn_dist)
    rho = np.zeros(n)
    sigma = np.ones(n)
    for i in range(n):
        row = knn_dist[i]
        nz = row[row > 0]
        rho[i] = nz[0] if len(nz) else 0.0
        gap = np.maximum(row - rho[i], 0.0)
        lo, hi, mid = 0.0, math.inf, 1.0
        for _ in range(BISECTION_STEPS):
            s = float(np.exp(-gap / mid).sum())
            if abs(s - target) < SMOOTH_K_TOLERANCE:
                break
            if s > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2.0 if hi == math.inf else (lo + hi) / 2.0
        sigma[i] = max(mid, SIGMA_FLOOR)
    return rho, sigma


def fuzzy_graph(x: np.ndarray, p: UmapParams) -> FuzzyGraph:
    x = np.asarray(x, dtype=float)
    n = len(x)
    k = p.n_neighbors
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} points for n_neighbors={k}, got {n}")
    idx, dist = exact_knn(x, k)
    rho, sigma = smooth_knn(dist, k)
    w = np.exp(-np.maximum(dist - rho[:, None], 0.0) / sigma[:, None])
    rows = np.repeat(np.arange(n), k)
    directed = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, n))
    t = directed.T.tocsr()
    union = (directed + t - directed.multiply(t)).tocsr()
    union.eliminate_zeros()
    union.sort_indices()
    return FuzzyGraph(idx, dist, rho, sigma, directed, union)


def fit_ab(min_dist: float, spread: float = 1.0) -> tuple[float, float]:
    """Least-squares (a, b) so that 1/(1 + a x^(2b)) tracks the min_dist target curve."""
    xv = np.linspace(0.0, spread * 3.0, 300)
    yv = np.where(xv < min_dist, 1.0, np.exp(-(xv - min_dist) / spread))

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2.0 * b))

    (a, b), _ = curve_fit(curve, xv, yv)
    return float(a), float(b)


def epochs_per_sample(weights: np.ndarray, n_epochs: int) -> np.ndarray:
    out = np.full(len(weights), -1.0)
    n_samples = n_epochs * (weights / weights.max())
    pos = n_samples > 0
    out[pos] = n_epochs / n_samples[pos]
    return out


@numba.njit(cache=True)
def _sgd_epoch(emb, head, tail, active, n_neg, neg_idx, a, b, alpha):
    dim = emb.shape[1]
    cursor = 0
    for t in range(active.shape[0]):
        i = active[t]
        j = head[i]
        k = tail[i]
        dist_sq = 0.0
        for d in range(dim):
            diff = emb[j, d] - emb[k, d]
            dist_sq += diff * diff
        if dist_sq > 0.0:
            coeff = -2.0 * a * b * dist_sq ** (b - 1.0) / (a * dist_sq ** b + 1.0)
        else:
            coeff = 0.0
        for d in range(dim):
            g = coeff * (emb[j, d] - emb[k, d])
            if g > 4.0:
                g = 4.0
            elif g < -4.0:
                g = -4.0
            emb[j, d] += g * alpha
            emb[k, d] -= g * alpha
        for _ in range(n_neg[t]):
            k = neg_idx[cursor]
            cursor += 1
            dist_sq = 0.0
            for d in range(dim):
                diff = emb[j, d] - emb[k, d]
                dist_sq += diff * diff
            if dist_sq > 0.0:
                coeff = 2.0 * b / ((0.001 + dist_sq) * (a * dist_sq ** b + 1.0))
            elif j == k:
                continue
            else:
                coeff = 0.0
            for d in range(dim):
                if coeff > 0.0:
                    g = coeff * (emb[j, d] - emb[k, d])
                    if g > 4.0:
                        g = 4.0
                    elif g < -4.0:
                        g = -4.0
                else:
                    g = 4.0
                emb[j, d] += g * alpha


def optimize_embedding(fg: FuzzyGraph, p: UmapParams,
                       on_epoch: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """SGD over the fuzzy graph's edges; ``on_epoch(epoch, embedding)`` after each epoch."""
    rng = np.random.default_rng(p.seed)
    n = fg.n
    emb = rng.uniform(-10.0, 10.0, size=(n, p.n_components))
    coo = fg.graph.tocoo()
    w = coo.data
    keep = w >= w.max() / p.n_epochs
    head = coo.row[keep].astype(np.int64)
    tail = coo.col[keep].astype(np.int64)
    eps = epochs_per_sample(w[keep], p.n_epochs)
    eps_neg = eps / p.negative_samples
    next_pos = eps.copy()
    next_neg = eps_neg.copy()
    a, b = fit_ab(p.min_dist)
    for epoch in range(p.n_epochs):
        active = np.flatnonzero(next_pos <= epoch).astype(np.int64)
        n_neg = np.floor((epoch - next_neg[active]) / eps_neg[active]).astype(np.int64)
        n_neg = np.maximum(n_neg, 0)
        neg_idx = rng.integers(0, n, size=int(n_neg.sum())).astype(np.int64)
        alpha = p.learning_rate * (1.0 - epoch / p.n_epochs)
        _sgd_epoch(emb, head, tail, active, n_neg, neg_idx, a, b, alpha)
        next_pos[active] += eps[active]
        next_neg[active] += n_neg * eps_neg[active]
        if on_epoch is not None:
            on_epoch(epoch, emb)
    return emb


def umap_embed(x: np.ndarray, p: UmapParams = UmapParams(),
               on_epoch: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    return optimize_embedding(fuzzy_graph(x, p), p, on_epoch)


def sampled_cross_entropy(fg: FuzzyGraph, emb: np.ndarray, a: float, b: float,
                          n_negative: int = 5, seed: int = 0) -> float:
    """Fuzzy-set cross entropy over all graph edges plus a fixed sample of random pairs."""
    coo = fg.graph.tocoo()
    rng = np.random.default_rng(seed)
    neg_i = rng.integers(0, fg.n, size=len(coo.data) * n_negative)
    neg_j = rng.integers(0, fg.n, size=len(coo.data) * n_negative)
    ok = neg_i != neg_j
    i = np.concatenate([coo.row, neg_i[ok]])
    j = np.concatenate([coo.col, neg_j[ok]])
    w = np.concatenate([coo.data, np.asarray(fg.graph[neg_i[ok], neg_j[ok]]).ravel()])
    d2 = ((emb[i] - emb[j]) ** 2).sum(axis=1)
    q = 1.0 / (1.0 + a * d2 ** b)
    q = np.clip(q, 1e-12, 1.0 - 1e-12)
    return float(-(w * np.log(q) + (1.0 - w) * np.log(1.0 - q)).sum() / len(w))
