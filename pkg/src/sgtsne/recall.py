"""Stochastic-neighbor recall of an embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .graph_core import SparseConditionalMatrix

HIST_EDGES = np.round(np.linspace(0.0, 1.0, 21), 2)


@dataclass
class RecallReport:
    recall: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    k_eval: int

    @property
    def mean(self) -> float:
        return float(self.recall.mean())


def embedding_knn(Y, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points of every row of ``Y``."""
    Y = np.asarray(Y, dtype=np.float64)
    n = Y.shape[0]
    _, idx = cKDTree(Y).query(Y, k=k + 1)
    idx = idx.reshape(n, k + 1)
    own = idx == np.arange(n)[:, None]
    missing = ~own.any(axis=1)
    own[missing, -1] = True
    return idx[~own].reshape(n, k)


def recall_report(Pc: SparseConditionalMatrix, Y, k_eval: int = 90) -> RecallReport:
    """``recall(i) = sum_j p_{j|i} b_ij`` over the kNN graph ``B`` of ``Y``."""
    Y = np.asarray(Y, dtype=np.float64)
    n = Pc.n
    if Y.shape[0] != n:
        raise ValueError("coordinate rows do not match the graph")
    if not 0 < k_eval < n:
        raise ValueError(f"k_eval must be in [1, {n - 1}], got {k_eval}")
    nb = embedding_knn(Y, k_eval)
    B = sp.csr_matrix((np.ones(nb.size), (np.repeat(np.arange(n), k_eval), nb.ravel())), shape=(n, n))
    rec = np.asarray(Pc.to_csr().multiply(B).sum(axis=1)).ravel()
    np.clip(rec, 0.0, 1.0, out=rec)
    counts, _ = np.histogram(rec, bins=HIST_EDGES)
    return RecallReport(rec, HIST_EDGES.copy(), counts, k_eval)
