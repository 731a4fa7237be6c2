"""Synthetic graphs used by the tests and the acceptance harness."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .graph_core import SparseConditionalMatrix


def mobius_lattice(n_u: int = 256, n_v: int = 32, half_width: float = 0.4,
                   radius: float = 1.0) -> np.ndarray:
    """Points of an ``n_u x n_v`` lattice on a Mobius strip in R^3.

    Rows are ordered with ``v`` fastest.  With the defaults the lattice
    spacing is roughly equal along both parameter directions.
    """
    u = np.linspace(0.0, 2 * np.pi, n_u, endpoint=False)
    v = np.linspace(-half_width, half_width, n_v)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    r = radius + vv * np.cos(uu / 2)
    pts = np.stack([r * np.cos(uu), r * np.sin(uu), vv * np.sin(uu / 2)], axis=-1)
    return pts.reshape(-1, 3)


def knn_graph(points: np.ndarray, k: int) -> SparseConditionalMatrix:
    """Row-stochastic kNN graph with Gaussian distance weights.

    The bandwidth of row ``i`` is its mean neighbor distance, so every row
    has a comparable spread of weights before any rescaling.
    """
    n = points.shape[0]
    if not 0 < k < n:
        raise ValueError("need 0 < k < n")
    dist, idx = cKDTree(points).query(points, k=k + 1)
    dist, idx = _drop_self(dist, idx)
    sigma = dist.mean(axis=1, keepdims=True)
    # coincident neighbors only: equal weights
    sigma[sigma == 0] = 1.0
    w = np.exp(-((dist / sigma) ** 2))
    rows = np.repeat(np.arange(n), k)
    return SparseConditionalMatrix.from_triplets(n, rows, idx.ravel(), w.ravel())


def knn_distances(points: np.ndarray, k: int):
    """``(rows, cols, squared distances)`` of the kNN graph."""
    n = points.shape[0]
    dist, idx = cKDTree(points).query(points, k=k + 1)
    dist, idx = _drop_self(dist, idx)
    return np.repeat(np.arange(n), k), idx.ravel(), (dist**2).ravel()


def _drop_self(dist, idx):
    n, k1 = idx.shape
    own = idx == np.arange(n)[:, None]
    # rows where duplicates hid the query point lose their farthest entry
    missing = ~own.any(axis=1)
    own[missing, -1] = True
    keep = ~own
    return dist[keep].reshape(n, k1 - 1), idx[keep].reshape(n, k1 - 1)


def mobius_graph(k: int = 150, **lattice) -> SparseConditionalMatrix:
    return knn_graph(mobius_lattice(**lattice), k)


def two_cliques(size: int, interleave: bool = True, bridge: bool = False) -> SparseConditionalMatrix:
    """Two ``size``-cliques with uniform weights.

    With ``interleave`` the cliques hold the even and odd ids; otherwise
    ``0..size-1`` and ``size..2size-1``.  ``bridge`` joins the two first
    members by one extra edge.
    """
    ids = np.arange(2 * size)
    groups = (ids[0::2], ids[1::2]) if interleave else (ids[:size], ids[size:])
    rows, cols = [], []
    for g in groups:
        r, c = np.meshgrid(g, g, indexing="ij")
        off = r != c
        rows.append(r[off])
        cols.append(c[off])
    if bridge:
        a, b = groups[0][0], groups[1][0]
        rows.append(np.array([a, b]))
        cols.append(np.array([b, a]))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    return SparseConditionalMatrix.from_triplets(2 * size, rows, cols, np.ones(rows.size))


def clique_labels(size: int, interleave: bool = True) -> np.ndarray:
    ids = np.arange(2 * size)
    return ids % 2 if interleave else ids // size


def random_stochastic(n: int, min_deg: int, max_deg: int, seed: int = 0) -> SparseConditionalMatrix:
    """Random row-stochastic graph with degrees uniform in ``[min_deg, max_deg]``."""
    rng = np.random.default_rng(seed)
    deg = rng.integers(min_deg, max_deg + 1, size=n)
    rows, cols = [], []
    for i, k in enumerate(deg):
        nb = rng.choice(n - 1, size=k, replace=False)
        nb[nb >= i] += 1
        rows.append(np.full(k, i))
        cols.append(nb)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    return SparseConditionalMatrix.from_triplets(n, rows, cols, rng.random(rows.size) + 1e-3)


def regular_uniform(n: int, k: int, seed: int = 0) -> SparseConditionalMatrix:
    """``k`` out-neighbors per vertex, every weight ``1/k``."""
    rng = np.random.default_rng(seed)
    rows = np.repeat(np.arange(n), k)
    cols = np.empty(n * k, dtype=np.int64)
    for i in range(n):
        nb = rng.choice(n - 1, size=k, replace=False)
        nb[nb >= i] += 1
        cols[i * k:(i + 1) * k] = nb
    return SparseConditionalMatrix.from_triplets(n, rows, cols, np.full(n * k, 1.0 / k))
