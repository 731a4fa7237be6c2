"""Exact O(n^2) reference for Q, Z, the KL objective and its gradient.

Throughout, ``w_ij = 1 / (1 + |y_i - y_j|^2)`` is the unnormalized Student-t
kernel and ``q_ij = w_ij / Z`` with ``Z = sum_{k != l} w_kl``.  The gradient
of ``KL(P || Q)`` is

    4 sum_j p_ij w_ij (y_i - y_j)  -  (4 / Z) sum_j w_ij^2 (y_i - y_j),

i.e. the attractive sum minus the repulsive sum with a single global 1/Z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

DENSE_Q_CAP = 20_000


@dataclass
class GradientTerms:
    attractive: np.ndarray
    repulsive: np.ndarray
    z: float

    @property
    def gradient(self) -> np.ndarray:
        return self.attractive - self.repulsive


def _coords(Y):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2:
        raise ValueError("coordinates must be an (n, d) array")
    if np.isnan(Y).any():
        raise ValueError("coordinates contain NaN")
    return np.ascontiguousarray(Y)


@numba.njit(cache=True, parallel=True)
def _pairwise_sums(Y, zrow, rep):
    n, d = Y.shape
    for i in numba.prange(n):
        zi = 0.0
        acc = np.zeros(d)
        for j in range(n):
            if j == i:
                continue
            r2 = 0.0
            for a in range(d):
                diff = Y[i, a] - Y[j, a]
                r2 += diff * diff
            w = 1.0 / (1.0 + r2)
            zi += w
            w2 = w * w
            for a in range(d):
                acc[a] += w2 * (Y[i, a] - Y[j, a])
        zrow[i] = zi
        for a in range(d):
            rep[i, a] = acc[a]


@numba.njit(cache=True, parallel=True)
def _sparse_attraction(indptr, indices, data, Y, out):
    n, d = Y.shape
    for i in numba.prange(n):
        for a in range(d):
            out[i, a] = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            r2 = 0.0
            for a in range(d):
                diff = Y[i, a] - Y[j, a]
                r2 += diff * diff
            c = data[p] / (1.0 + r2)
            for a in range(d):
                out[i, a] += c * (Y[i, a] - Y[j, a])


def exact_repulsion(Y):
    """Return ``(sum_j w_ij^2 (y_i - y_j), Z)`` by direct summation."""
    Y = _coords(Y)
    n = Y.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    zrow = np.empty(n)
    rep = np.empty_like(Y)
    _pairwise_sums(Y, zrow, rep)
    return rep, float(zrow.sum())


def exact_q_and_z(Y, dense: bool = False, cap: int = DENSE_Q_CAP):
    """Normalization ``Z`` and, on request, the dense ``q`` matrix (zero diagonal)."""
    Y = _coords(Y)
    n = Y.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    if not dense:
        return exact_repulsion(Y)[1]
    if n > cap:
        raise ValueError(f"dense q requested for n={n} above cap {cap}")
    # direct differences (no Gram-matrix cancellation), a block of rows at a time
    r2 = np.empty((n, n))
    step = max(1, 4_000_000 // (n * Y.shape[1]))
    for a in range(0, n, step):
        diff = Y[a:a + step, None, :] - Y[None, :, :]
        np.einsum("ijk,ijk->ij", diff, diff, out=r2[a:a + step])
    w = 1.0 / (1.0 + r2)
    np.fill_diagonal(w, 0.0)
    z = float(w.sum())
    return z, w / z


def attractive_exact(P, Y):
    """``4 sum_j p_ij w_ij (y_i - y_j)`` over the stored entries of ``P``."""
    Y = _coords(Y)
    csr = P.to_csr() if hasattr(P, "to_csr") else P
    if csr.shape[0] != Y.shape[0]:
        raise ValueError("P and Y disagree on n")
    out = np.empty_like(Y)
    _sparse_attraction(csr.indptr.astype(np.int64), csr.indices.astype(np.int64),
                       csr.data.astype(np.float64), Y, out)
    return 4.0 * out


def exact_gradient(P, Y) -> GradientTerms:
    """Attractive and repulsive gradient terms by direct summation."""
    Y = _coords(Y)
    rep, z = exact_repulsion(Y)
    att = attractive_exact(P, Y)
    return GradientTerms(attractive=att, repulsive=rep * (4.0 / z), z=z)


def sparse_cross_terms(P, Y):
    """``sum p log p`` and ``sum p log w`` over the stored entries of ``P``."""
    Y = _coords(Y)
    csr = P.to_csr() if hasattr(P, "to_csr") else P
    coo = csr.tocoo()
    p = coo.data
    diff = Y[coo.row] - Y[coo.col]
    logw = -np.log1p(np.einsum("ij,ij->i", diff, diff))
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask]))), float(np.sum(p * logw))


def kl_from_z(P, Y, z: float) -> float:
    """KL(P || Q) given a (possibly approximate) normalization ``z``."""
    plogp, plogw = sparse_cross_terms(P, Y)
    csr = P.to_csr() if hasattr(P, "to_csr") else P
    mass = float(csr.data.sum())
    return plogp - plogw + mass * np.log(z)


def kl_divergence(P, Y) -> float:
    """Exact ``sum p_ij log(p_ij / q_ij)`` over stored entries of ``P``."""
    Y = _coords(Y)
    z = exact_q_and_z(Y)
    return kl_from_z(P, Y, z)
