"""Sparse attractive term with a locality-enhancing symmetric reordering.

``P`` is permuted once so that similar rows and columns sit together and its
nonzeros concentrate in dense tiles.  The attractive sum is then evaluated
tile by tile.  Coordinates live in this permuted ("sparse") order during
the optimization.  The repulsive term wants them in grid-cell order, and
:func:`translocate` moves them between the two orders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .graph_core import JointDistribution

STRATEGIES = ("identity", "bfs-rcm", "cluster-hint")


class StalePlanError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReorderedMatrix:
    """``P`` in permuted index space.

    ``perm[i]`` is the new index of original vertex ``i``; ``order`` is the
    inverse (``order[k]`` is the original vertex placed at position ``k``).
    """

    perm: np.ndarray
    order: np.ndarray
    P_perm: JointDistribution
    block_size: int
    tile_ptr: np.ndarray
    tile_rb: np.ndarray
    tile_cb: np.ndarray
    local_row: np.ndarray
    local_col: np.ndarray
    tile_vals: np.ndarray
    rowblock_ptr: np.ndarray

    @property
    def n(self) -> int:
        return self.P_perm.n

    def block_density(self) -> np.ndarray:
        """Number of nonzeros per tile."""
        return np.diff(self.tile_ptr)


def _permute(P: JointDistribution, perm: np.ndarray) -> JointDistribution:
    coo = P.to_csr().tocoo()
    new = sp.csr_matrix((coo.data, (perm[coo.row], perm[coo.col])), shape=(P.n, P.n))
    new.sort_indices()
    return JointDistribution(P.n, new.indptr.astype(np.int64), new.indices.astype(np.int64),
                             new.data.astype(np.float64))


def _tile(P: JointDistribution, block_size: int):
    n = P.n
    rows = np.repeat(np.arange(n), np.diff(P.indptr))
    cols = P.indices
    rb = rows // block_size
    cb = cols // block_size
    n_blocks = (n + block_size - 1) // block_size
    key = rb * n_blocks + cb
    order = np.lexsort((cols, rows, key))
    key_s = key[order]
    if key_s.size:
        first = np.empty(key_s.size, dtype=bool)
        first[0] = True
        first[1:] = key_s[1:] != key_s[:-1]
        starts = np.flatnonzero(first)
    else:
        starts = np.zeros(0, dtype=np.int64)
    tile_ptr = np.append(starts, key_s.size).astype(np.int64)
    tile_keys = key_s[starts]
    tile_rb = (tile_keys // n_blocks).astype(np.int64)
    tile_cb = (tile_keys % n_blocks).astype(np.int64)
    local_row = (rows[order] - rb[order] * block_size).astype(np.int32)
    local_col = (cols[order] - cb[order] * block_size).astype(np.int32)
    vals = P.values[order]
    rowblock_ptr = np.searchsorted(tile_rb, np.arange(n_blocks + 1)).astype(np.int64)
    return tile_ptr, tile_rb, tile_cb, local_row, local_col, vals, rowblock_ptr


def reorder_bsdb(P: JointDistribution, strategy: str = "bfs-rcm", labels=None,
                 block_size: int = 256) -> ReorderedMatrix:
    """Symmetrically permute ``P`` toward a block-sparse form with dense blocks.

    ``bfs-rcm`` uses reverse Cuthill-McKee on the pattern; ``cluster-hint``
    groups vertices by ``labels`` (stable within a label); ``identity`` keeps
    the input order.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown reorder strategy {strategy!r}")
    if block_size < 1:
        raise ValueError("block_size must be positive")
    n = P.n
    if strategy == "identity":
        order = np.arange(n)
    elif strategy == "bfs-rcm":
        order = reverse_cuthill_mckee(P.to_csr(), symmetric_mode=True).astype(np.int64)
    else:
        if labels is None:
            raise ValueError("cluster-hint needs a label per vertex")
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got {labels.shape}")
        order = np.argsort(labels, kind="stable")
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.arange(n)
    P_perm = P if strategy == "identity" else _permute(P, perm)
    return ReorderedMatrix(perm, order, P_perm, block_size, *_tile(P_perm, block_size))


def read_cluster_labels(path, n: int) -> np.ndarray:
    """Read a ``vertex<TAB>label`` file; every vertex must be labelled."""
    labels = [None] * n
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'vertex<TAB>label'")
            v = int(parts[0])
            if not 0 <= v < n:
                raise ValueError(f"{path}:{lineno}: vertex {v} outside [0, {n})")
            labels[v] = parts[1]
    missing = [i for i, lab in enumerate(labels) if lab is None]
    if missing:
        raise ValueError(f"{path}: no label for vertices {missing[:10]}")
    # integer labels sort numerically, anything else lexically
    try:
        return np.array([int(x) for x in labels])
    except ValueError:
        return np.array(labels)


@numba.njit(cache=True, parallel=True)
def _tiled_attraction(rowblock_ptr, tile_ptr, tile_rb, tile_cb, lrow, lcol, vals, B, Y, out):
    n, d = Y.shape
    n_rb = rowblock_ptr.shape[0] - 1
    for rb in numba.prange(n_rb):
        r0 = rb * B
        r1 = min(r0 + B, n)
        for i in range(r0, r1):
            for a in range(d):
                out[i, a] = 0.0
        for t in range(rowblock_ptr[rb], rowblock_ptr[rb + 1]):
            c0 = tile_cb[t] * B
            for p in range(tile_ptr[t], tile_ptr[t + 1]):
                i = r0 + lrow[p]
                j = c0 + lcol[p]
                r2 = 0.0
                for a in range(d):
                    diff = Y[i, a] - Y[j, a]
                    r2 += diff * diff
                c = vals[p] / (1.0 + r2)
                for a in range(d):
                    out[i, a] += c * (Y[i, a] - Y[j, a])


def attractive_term(R: ReorderedMatrix, Y_perm, exaggeration: float = 1.0) -> np.ndarray:
    """``4 alpha sum_j p_ij w_ij (y_i - y_j)`` in the permuted index space."""
    Y = np.ascontiguousarray(Y_perm, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != R.n:
        raise ValueError(f"expected ({R.n}, d) coordinates, got {Y.shape}")
    out = np.empty_like(Y)
    _tiled_attraction(R.rowblock_ptr, R.tile_ptr, R.tile_rb, R.tile_cb, R.local_row,
                      R.local_col, R.tile_vals, R.block_size, Y, out)
    out *= 4.0
    if exaggeration != 1.0:
        out *= exaggeration
    return out


class TranslocationPlan:
    """Moves point arrays between the original, sparse and grid orders.

    Each ordering is described by the original vertex held at every
    position.  A move is performed in two layers: contiguous source runs
    are first bucketed by destination block, then each destination block
    is permuted locally.
    """

    def __init__(self, R: ReorderedMatrix, ws, block: int = 1024):
        if ws.point_perm is None:
            raise RuntimeError("grid workspace has not been binned")
        self.workspace = ws
        self.grid_version = ws.version
        self.block = block
        self.n = R.n
        self._orig = {
            "original": np.arange(R.n),
            "sparse": R.order,
            "grid": R.order[ws.point_perm],
        }
        self._stages = {}

    def _stage(self, src: str, dst: str):
        key = (src, dst)
        if key not in self._stages:
            inv_src = np.empty(self.n, dtype=np.int64)
            inv_src[self._orig[src]] = np.arange(self.n)
            gather = inv_src[self._orig[dst]]  # out[k] = values[gather[k]]
            dest_of = np.empty(self.n, dtype=np.int64)
            dest_of[gather] = np.arange(self.n)
            # layer 1: read sources in ascending order, grouped by destination block
            staged = np.argsort(dest_of // self.block, kind="stable")
            # layer 2: local permutation inside every destination block
            where = np.empty(self.n, dtype=np.int64)
            where[staged] = np.arange(self.n)
            local = where[gather]
            self._stages[key] = (staged, local)
        return self._stages[key]

    def check(self):
        if self.workspace.version != self.grid_version:
            raise StalePlanError("grid ordering changed since the plan was built")


def translocate(values, from_order: str, to_order: str, plan: TranslocationPlan) -> np.ndarray:
    """Reorder rows of ``values`` from one ordering to another."""
    plan.check()
    values = np.asarray(values)
    if values.shape[0] != plan.n:
        raise ValueError("row count does not match the plan")
    if from_order == to_order:
        return values.copy()
    staged, local = plan._stage(from_order, to_order)
    buffer = values[staged]
    return buffer[local]
