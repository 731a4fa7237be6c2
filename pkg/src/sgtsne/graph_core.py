"""Sparse stochastic graphs: storage, validation, file I/O and symmetrization."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
STRICT_TOL = 1e-10


class GraphError(ValueError):
    pass


class GraphParseError(GraphError):
    pass


class IndexRangeError(GraphError):
    pass


class IsolatedVertexError(GraphError):
    def __init__(self, vertices):
        self.vertices = list(vertices)
        shown = ", ".join(str(v) for v in self.vertices[:10])
        more = "" if len(self.vertices) <= 10 else f" (+{len(self.vertices) - 10} more)"
        super().__init__(f"isolated vertex with no outgoing edges: {shown}{more}")


class NonStochasticError(GraphError):
    pass


@dataclass(frozen=True)
class SparseConditionalMatrix:
    """Row-stochastic CSR matrix of conditional weights ``p_{j|i}``.

    Rows are vertices, stored columns are out-neighbors.  Instances built
    through :meth:`from_triplets` satisfy the stochastic invariants; the raw
    constructor does no checking.
    """

    n: int
    row_starts: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_starts)

    def row(self, i: int):
        s, e = self.row_starts[i], self.row_starts[i + 1]
        return self.col_indices[s:e], self.values[s:e]

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.degrees)

    def row_sums(self) -> np.ndarray:
        return _segment_sums(self.values, self.row_starts)

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_starts), shape=(self.n, self.n))

    def with_values(self, values) -> SparseConditionalMatrix:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError("value array does not match the sparsity pattern")
        return SparseConditionalMatrix(self.n, self.row_starts, self.col_indices, values)

    @classmethod
    def from_csr(cls, csr, normalize: bool = True, strict: bool = False) -> SparseConditionalMatrix:
        coo = sp.coo_matrix(csr)
        return cls.from_triplets(coo.shape[0], coo.row, coo.col, coo.data, normalize=normalize, strict=strict)

    @classmethod
    def from_triplets(cls, n, rows, cols, vals, normalize=True, strict=False) -> SparseConditionalMatrix:
        """Assemble, clean and validate a conditional matrix.

        Duplicates are summed, explicit zeros and self-loops dropped.  With
        ``normalize`` rows are rescaled to sum to one; with ``strict`` a row
        that is not already stochastic is an error.
        """
        graph = _assemble(n, rows, cols, vals, drop_zeros=True)
        if np.any(graph.values < 0):
            bad = np.unique(graph.row_ids()[graph.values < 0])
            raise GraphError(f"negative weights in rows {bad[:10].tolist()}")
        empty = np.flatnonzero(graph.degrees == 0)
        if empty.size:
            raise IsolatedVertexError(empty)
        if strict:
            dev = np.abs(graph.row_sums() - 1.0)
            if np.any(dev > STRICT_TOL):
                bad = np.flatnonzero(dev > STRICT_TOL)
                raise NonStochasticError(f"rows not stochastic (strict mode): {bad[:10].tolist()}")
            return graph
        return normalize_rows(graph) if normalize else graph


@dataclass(frozen=True)
class JointDistribution:
    """Symmetric CSR matrix ``P = (P_c + P_c^T) / (2n)``."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def total_mass(self) -> float:
        return float(self.values.sum())

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=(self.n, self.n))

    @classmethod
    def from_csr(cls, csr) -> JointDistribution:
        csr = sp.csr_matrix(csr)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.indptr.astype(np.int64), csr.indices.astype(np.int64),
                   csr.data.astype(np.float64))


@dataclass(frozen=True)
class KnnDistances:
    """kNN mask with squared distances ``d_ij^2`` as values (not stochastic)."""

    n: int
    row_starts: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_starts)


def _segment_sums(values, starts):
    out = np.zeros(starts.shape[0] - 1)
    nonempty = starts[1:] > starts[:-1]
    if values.size:
        sums = np.add.reduceat(values, starts[:-1][nonempty])
        out[nonempty] = sums
    return out


def _assemble(n, rows, cols, vals, drop_zeros):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if not (rows.shape == cols.shape == vals.shape):
        raise GraphError("row, column and value arrays differ in length")
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
        raise IndexRangeError(f"vertex index outside [0, {n})")
    if not np.all(np.isfinite(vals)):
        raise GraphError("non-finite edge values")
    loops = rows == cols
    if loops.any():
        log.warning("dropped %d self-loop entries", int(loops.sum()))
        keep = ~loops
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if rows.size:
        new = np.empty(rows.size, dtype=bool)
        new[0] = True
        new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new)
        vals = np.add.reduceat(vals, starts)
        rows, cols = rows[starts], cols[starts]
    if drop_zeros:
        keep = vals != 0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    row_starts = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=row_starts[1:])
    return SparseConditionalMatrix(int(n), row_starts, cols, vals)


def normalize_rows(M: SparseConditionalMatrix) -> SparseConditionalMatrix:
    """Divide every row by its sum."""
    with np.errstate(over="ignore"):
        sums = M.row_sums()
    if np.any(~(sums > 0)):
        bad = np.flatnonzero(~(sums > 0))
        raise NonStochasticError(f"nonpositive row sum at rows {bad[:10].tolist()}")
    values = M.values.copy()
    rid = M.row_ids()
    with np.errstate(over="ignore", divide="ignore"):
        # sums whose reciprocal is not finite, or that overflowed
        tiny = ~np.isfinite(1.0 / sums) | ~np.isfinite(sums)
    if tiny.any():
        # rescale rows whose sum would underflow or overflow the reciprocal
        peak = np.zeros(M.n)
        np.maximum.at(peak, rid, values)
        sel = tiny[rid]
        values[sel] /= peak[rid[sel]]
        sums = _segment_sums(values, M.row_starts)
    values /= sums[rid]
    return SparseConditionalMatrix(M.n, M.row_starts, M.col_indices, values)


def symmetrize(Pc: SparseConditionalMatrix) -> JointDistribution:
    """Joint distribution over the pattern ``A | A^T``."""
    C = Pc.to_csr()
    S = (C + C.T).tocsr()
    S.sum_duplicates()
    S.sort_indices()
    S.data /= 2.0 * Pc.n
    return JointDistribution.from_csr(S)


# -- file formats ---------------------------------------------------------

FORMATS = ("matrix-market", "edge-list-tsv")


def infer_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".mtx", ".mm"):
        return "matrix-market"
    if ext in (".tsv", ".txt", ".edges"):
        return "edge-list-tsv"
    raise GraphParseError(f"cannot infer graph format from extension {ext!r}")


def _load_numeric(lines, ncols, path, first_line):
    if not lines:
        return np.empty((0, ncols))
    try:
        data = np.loadtxt(lines, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise GraphParseError(f"{path}: malformed entry near line {first_line}: {exc}") from None
    if data.shape[1] != ncols:
        raise GraphParseError(f"{path}: expected {ncols} columns per entry, found {data.shape[1]}")
    return data


def _as_index(col, path):
    idx = col.astype(np.int64)
    if not np.array_equal(idx, col):
        raise GraphParseError(f"{path}: non-integer vertex index")
    return idx


def read_triplets(path, format: str | None = None):
    """Read ``(n, rows, cols, values)`` with 0-based indices from disk."""
    fmt = format or infer_format(path)
    if fmt not in FORMATS:
        raise GraphParseError(f"unknown format {fmt!r}")
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read().splitlines()
    if fmt == "matrix-market":
        return _read_mtx(text, path)
    return _read_tsv(text, path)


def _read_mtx(lines, path):
    if not lines or not lines[0].startswith("%%MatrixMarket"):
        raise GraphParseError(f"{path}: missing %%MatrixMarket banner")
    banner = lines[0].lower().split()
    if len(banner) != 5 or banner[1] != "matrix" or banner[2] != "coordinate":
        raise GraphParseError(f"{path}: only 'matrix coordinate' files are supported")
    field, symmetry = banner[3], banner[4]
    if field not in ("real", "integer", "pattern") or symmetry not in ("general", "symmetric"):
        raise GraphParseError(f"{path}: unsupported field/symmetry {field}/{symmetry}")
    k = 1
    while k < len(lines) and (lines[k].startswith("%") or not lines[k].strip()):
        k += 1
    if k == len(lines):
        raise GraphParseError(f"{path}: missing size line")
    try:
        nr, nc, nnz = (int(t) for t in lines[k].split())
    except ValueError:
        raise GraphParseError(f"{path}: malformed size line {lines[k]!r}") from None
    if nr != nc:
        raise GraphParseError(f"{path}: matrix is {nr}x{nc}, expected square")
    body = [ln for ln in lines[k + 1:] if ln.strip() and not ln.startswith("%")]
    if len(body) != nnz:
        raise GraphParseError(f"{path}: header announces {nnz} entries, found {len(body)}")
    data = _load_numeric(body, 2 if field == "pattern" else 3, path, k + 2)
    rows = _as_index(data[:, 0], path) - 1
    cols = _as_index(data[:, 1], path) - 1
    vals = np.ones(len(body)) if field == "pattern" else data[:, 2]
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= nr or cols.max() >= nr):
        raise IndexRangeError(f"{path}: index outside [1, {nr}]")
    if symmetry == "symmetric":
        off = rows != cols
        rows, cols, vals = (np.concatenate([rows, cols[off]]), np.concatenate([cols, rows[off]]),
                            np.concatenate([vals, vals[off]]))
    return nr, rows, cols, vals


def _read_tsv(lines, path):
    n = None
    body = []
    first = None
    for k, ln in enumerate(lines):
        s = ln.strip()
        if not s:
            continue
        if s.startswith("#"):
            for tok in s[1:].split():
                if tok.startswith("n="):
                    try:
                        n = int(tok[2:])
                    except ValueError:
                        raise GraphParseError(f"{path}: bad vertex count {tok!r}") from None
            continue
        if first is None:
            first = k + 1
        body.append(ln)
    data = _load_numeric(body, 3, path, first or 1)
    rows = _as_index(data[:, 0], path)
    cols = _as_index(data[:, 1], path)
    vals = data[:, 2]
    if rows.size and (rows.min() < 0 or cols.min() < 0):
        raise IndexRangeError(f"{path}: negative vertex index")
    top = int(max(rows.max(), cols.max())) + 1 if rows.size else 0
    if n is None:
        n = top
    elif top > n:
        raise IndexRangeError(f"{path}: index {top - 1} outside [0, {n})")
    return n, rows, cols, vals


def load_graph(path, format: str | None = None, normalize: bool = True,
               strict: bool = False) -> SparseConditionalMatrix:
    """Load a stochastic graph from MatrixMarket (1-based) or a TSV edge list (0-based)."""
    n, rows, cols, vals = read_triplets(path, format)
    return SparseConditionalMatrix.from_triplets(n, rows, cols, vals, normalize=normalize, strict=strict)


def load_distances(path, format: str | None = None) -> KnnDistances:
    """Load a kNN graph whose values are squared distances (zeros are kept)."""
    n, rows, cols, vals = read_triplets(path, format)
    if np.any(vals < 0):
        raise GraphError("squared distances must be nonnegative")
    g = _assemble(n, rows, cols, vals, drop_zeros=False)
    empty = np.flatnonzero(g.degrees == 0)
    if empty.size:
        raise IsolatedVertexError(empty)
    return KnnDistances(g.n, g.row_starts, g.col_indices, g.values)


def save_graph(M, path, format: str | None = None) -> None:
    """Write a CSR-layout graph with 17 significant digits."""
    fmt = format or infer_format(path)
    starts = M.row_starts if hasattr(M, "row_starts") else M.indptr
    cols = M.col_indices if hasattr(M, "col_indices") else M.indices
    rows = np.repeat(np.arange(M.n), np.diff(starts))
    with open(path, "w", encoding="ascii") as fh:
        if fmt == "matrix-market":
            fh.write("%%MatrixMarket matrix coordinate real general\n")
            fh.write(f"{M.n} {M.n} {rows.size}\n")
            for i, j, v in zip(rows + 1, cols + 1, M.values):
                fh.write(f"{i} {j} {v:.17g}\n")
        elif fmt == "edge-list-tsv":
            fh.write(f"# n={M.n}\n")
            for i, j, v in zip(rows, cols, M.values):
                fh.write(f"{i}\t{j}\t{v:.17g}\n")
        else:
            raise GraphParseError(f"unknown format {fmt!r}")
