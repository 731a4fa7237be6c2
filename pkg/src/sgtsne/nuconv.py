"""Grid-factored evaluation of the repulsive forces and the normalization Z.

The all-pairs Cauchy-kernel sums are split into three stages:

* S2G scatters point values onto an equispaced grid with tensor-product
  Lagrange weights,
* G2G applies the non-periodic (block-Toeplitz) kernel convolution on the
  grid,
* G2S gathers the convolved fields back with the same weights.

The G2G stage never builds a zero-padded grid.  A Toeplitz operator of size
``N`` along an axis is the average of a circulant and a skew-circulant
operator of the same size, both diagonalized by length-``N`` transforms (the
skew part after a half-sample modulation).  In ``d`` dimensions this gives
``2**d`` operators of grid size ``|G|`` that are applied one after the other
and accumulated into the output, so transient storage stays proportional
to ``|G|``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.fft

# per-dimension default caps on grid points per axis
DEFAULT_MAX_PER_AXIS = {1: 8192, 2: 2048, 3: 512}

_versions = itertools.count(1)


@dataclass(frozen=True)
class GridConfig:
    """Grid density and interpolation settings.

    The spacing target along an axis of data extent ``L`` is
    ``min(h_max, L / cells_per_extent)``.  Grid sizes are clamped to
    ``[min_per_axis, max_per_axis]`` and rounded up to an FFT-friendly length.
    """

    h_max: float = 0.15
    cells_per_extent: int = 50
    min_per_axis: int = 8
    max_per_axis: int | None = None
    interp_order: int = 7

    def __post_init__(self):
        if not self.h_max > 0:
            raise ValueError("h_max must be positive")
        if self.cells_per_extent < 1:
            raise ValueError("cells_per_extent must be >= 1")
        if self.interp_order < 1 or self.interp_order % 2 == 0:
            raise ValueError("interp_order must be odd and >= 1")

    @property
    def window(self) -> int:
        return self.interp_order + 1

    def cap(self, dims: int) -> int:
        if self.max_per_axis is not None:
            return self.max_per_axis
        return DEFAULT_MAX_PER_AXIS[dims]


@dataclass
class GridWorkspace:
    dims: int
    box_lo: np.ndarray
    box_hi: np.ndarray
    n_grid: tuple
    h: np.ndarray
    window: int
    bin_of_point: np.ndarray | None = None
    point_perm: np.ndarray | None = None
    sorted_points: np.ndarray | None = None
    weights: list = field(default_factory=list)
    base: np.ndarray | None = None
    version: int = 0

    @property
    def size(self) -> int:
        return math.prod(self.n_grid)

    @property
    def cell_shape(self) -> tuple:
        return tuple(n - 1 for n in self.n_grid)

    def nodes(self, axis: int) -> np.ndarray:
        return self.box_lo[axis] + self.h[axis] * np.arange(self.n_grid[axis])


@dataclass
class RepulsiveResult:
    frep: np.ndarray
    z: float


def _check_points(Y):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2 or Y.shape[1] not in (1, 2, 3):
        raise ValueError(f"expected an (n, d) array with d in 1..3, got {Y.shape}")
    if Y.shape[0] < 2:
        raise ValueError("need at least two points")
    if not np.all(np.isfinite(Y)):
        raise ValueError("coordinates must be finite")
    return Y


def setup_grid(Y, cfg: GridConfig | None = None) -> GridWorkspace:
    """Build an equispaced grid covering the points plus an interpolation margin."""
    cfg = cfg or GridConfig()
    Y = _check_points(Y)
    d = Y.shape[1]
    w = cfg.window
    pad = w // 2
    lo = np.empty(d)
    hi = np.empty(d)
    h = np.empty(d)
    sizes = []
    for a in range(d):
        ymin, ymax = Y[:, a].min(), Y[:, a].max()
        extent = ymax - ymin
        if extent <= 0.0 or extent < 1e-12 * max(1.0, abs(ymin)):
            # degenerate axis: smallest grid that still holds one full stencil,
            # with the points on the stencil's anchor node so weights are exact
            n_a = w
            h_a = cfg.h_max
            center = 0.5 * (ymin + ymax)
            lo[a] = center - ((w - 1) // 2) * h_a
        else:
            h_target = min(cfg.h_max, extent / cfg.cells_per_extent)
            n_a = math.ceil(extent / h_target) + 1 + 2 * pad
            n_a = min(max(n_a, cfg.min_per_axis), cfg.cap(d))
            n_a = scipy.fft.next_fast_len(n_a)
            if n_a > cfg.cap(d):
                n_a = cfg.cap(d)
            if n_a - 1 - 2 * pad < 1:
                raise ValueError("grid cap too small for the interpolation window")
            h_a = extent / (n_a - 1 - 2 * pad)
            lo[a] = ymin - pad * h_a
        h[a] = h_a
        hi[a] = lo[a] + (n_a - 1) * h_a
        sizes.append(int(n_a))
    return GridWorkspace(dims=d, box_lo=lo, box_hi=hi, n_grid=tuple(sizes), h=h, window=w)


def lagrange_weights(t: np.ndarray, window: int) -> np.ndarray:
    """Local Lagrange weights for fractional cell offsets ``t`` in [0, 1].

    Node ``k`` of the stencil sits at offset ``k - (window - 1) // 2`` from
    the left node of the cell.  Returns shape ``(len(t), window)``.
    """
    offs = (window - 1) // 2
    nodes = np.arange(window, dtype=np.float64) - offs
    t = np.asarray(t, dtype=np.float64)
    out = np.ones((t.shape[0], window))
    for k in range(window):
        for l in range(window):
            if l != k:
                out[:, k] *= (t - nodes[l]) / (nodes[k] - nodes[l])
    return out


def bin_points(Y, ws: GridWorkspace) -> GridWorkspace:
    """Assign points to dual-grid cells and sort them cell by cell."""
    Y = _check_points(Y)
    if Y.shape[1] != ws.dims:
        raise ValueError("dimension mismatch between points and grid")
    w = ws.window
    offs = (w - 1) // 2
    n = Y.shape[0]
    u = (Y - ws.box_lo) / ws.h
    cells = np.floor(u).astype(np.int64)
    cshape = ws.cell_shape
    slack = 1e-9
    for a in range(ws.dims):
        # cells whose stencil fits; points within rounding of the range are clipped in
        first, last = offs, ws.n_grid[a] - w + offs
        if np.any(u[:, a] < first - slack) or np.any(u[:, a] > last + 1 + slack):
            raise RuntimeError("point outside the grid box; grid must be rebuilt")
        np.clip(cells[:, a], first, last, out=cells[:, a])
    bins = np.ravel_multi_index(tuple(cells.T), cshape)
    perm = np.argsort(bins, kind="stable")
    cells_s = cells[perm]
    u_s = u[perm]
    ws.bin_of_point = bins
    ws.point_perm = perm
    ws.sorted_points = np.ascontiguousarray(Y[perm])
    ws.weights = [
        np.ascontiguousarray(lagrange_weights(u_s[:, a] - cells_s[:, a], w)) for a in range(ws.dims)
    ]
    base = np.zeros((n, 3), dtype=np.int64)
    base[:, : ws.dims] = cells_s - offs
    ws.base = base
    ws.version = next(_versions)
    return ws


def _padded(ws: GridWorkspace):
    """Weights and shapes extended to three axes with trivial trailing axes."""
    n = ws.base.shape[0]
    ones = np.ones((n, 1))
    W = list(ws.weights) + [ones] * (3 - ws.dims)
    shape3 = tuple(ws.n_grid) + (1,) * (3 - ws.dims)
    return W[0], W[1], W[2], shape3


@numba.njit(cache=True)
def _s2g_kernel(w0, w1, w2, base, values, grid):
    n = base.shape[0]
    nf = values.shape[1]
    for f in range(nf):
        for i in range(n):
            b0 = base[i, 0]
            b1 = base[i, 1]
            b2 = base[i, 2]
            v = values[i, f]
            for a in range(w0.shape[1]):
                va = v * w0[i, a]
                for b in range(w1.shape[1]):
                    vb = va * w1[i, b]
                    for c in range(w2.shape[1]):
                        grid[f, b0 + a, b1 + b, b2 + c] += vb * w2[i, c]


@numba.njit(cache=True, parallel=True)
def _g2s_kernel(w0, w1, w2, base, grid, out):
    n = base.shape[0]
    nf = grid.shape[0]
    for i in numba.prange(n):
        b0 = base[i, 0]
        b1 = base[i, 1]
        b2 = base[i, 2]
        for f in range(nf):
            acc = 0.0
            for a in range(w0.shape[1]):
                for b in range(w1.shape[1]):
                    wab = w0[i, a] * w1[i, b]
                    for c in range(w2.shape[1]):
                        acc += wab * w2[i, c] * grid[f, b0 + a, b1 + b, b2 + c]
            out[i, f] = acc


def s2g(values, ws: GridWorkspace) -> np.ndarray:
    """Scatter per-point values (in sorted order) onto the grid.

    ``values`` has shape ``(n,)`` or ``(n, nf)``; the result has shape
    ``n_grid`` or ``(nf, *n_grid)`` respectively.
    """
    if ws.base is None:
        raise RuntimeError("workspace has not been binned")
    values = np.asarray(values, dtype=np.float64)
    single = values.ndim == 1
    vals = np.ascontiguousarray(values.reshape(values.shape[0], -1))
    w0, w1, w2, shape3 = _padded(ws)
    grid = np.zeros((vals.shape[1],) + shape3)
    _s2g_kernel(w0, w1, w2, ws.base, vals, grid)
    grid = grid.reshape((vals.shape[1],) + tuple(ws.n_grid))
    return grid[0] if single else grid


def g2s(fields, ws: GridWorkspace) -> np.ndarray:
    """Interpolate grid fields at the (sorted) points."""
    if ws.base is None:
        raise RuntimeError("workspace has not been binned")
    fields = np.asarray(fields, dtype=np.float64)
    single = fields.ndim == ws.dims
    w0, w1, w2, shape3 = _padded(ws)
    g = np.ascontiguousarray(fields.reshape((-1,) + shape3))
    out = np.empty((ws.base.shape[0], g.shape[0]))
    _g2s_kernel(w0, w1, w2, ws.base, g, out)
    return out[:, 0] if single else out


@numba.njit(cache=True)
def _combined_symbol(work, n, h, e, active, power):
    """Write the modulated first column of one circulant/skew-circulant term.

    For each active axis ``a`` the operator is circulant (``e[a] == 0``) or
    skew-circulant (``e[a] == 1``); the column aggregates the Toeplitz
    symbol at offsets ``k`` and ``k - n`` with sign ``(-1)**e`` on the wrap.
    """
    n0, n1, n2 = n[0], n[1], n[2]
    for k0 in range(n0):
        for k1 in range(n1):
            for k2 in range(n2):
                acc = 0.0
                for s0 in range(2 if active[0] else 1):
                    if s0 == 1 and k0 == 0:
                        continue
                    x0 = (k0 - s0 * n0) * h[0]
                    g0 = -1.0 if (s0 == 1 and e[0] == 1) else 1.0
                    for s1 in range(2 if active[1] else 1):
                        if s1 == 1 and k1 == 0:
                            continue
                        x1 = (k1 - s1 * n1) * h[1]
                        g1 = -1.0 if (s1 == 1 and e[1] == 1) else 1.0
                        for s2 in range(2 if active[2] else 1):
                            if s2 == 1 and k2 == 0:
                                continue
                            x2 = (k2 - s2 * n2) * h[2]
                            g2 = -1.0 if (s2 == 1 and e[2] == 1) else 1.0
                            r2 = x0 * x0 + x1 * x1 + x2 * x2
                            kv = 1.0 / (1.0 + r2)
                            if power == 2:
                                kv = kv * kv
                            acc += g0 * g1 * g2 * kv
                phase = math.pi * (e[0] * k0 / n0 + e[1] * k1 / n1 + e[2] * k2 / n2)
                work[k0, k1, k2] = acc * (math.cos(phase) + 1j * math.sin(phase))


def _phase_tables(n: int):
    """Split ``exp(i pi k / n)`` into coarse and fine tables of ~sqrt(n) entries."""
    b = max(1, math.isqrt(n - 1) + 1) if n > 1 else 1
    coarse = np.exp(1j * np.pi * b * np.arange((n + b - 1) // b) / n)
    fine = np.exp(1j * np.pi * np.arange(b) / n)
    return b, coarse, fine


def _modulate(work, e3, tables, sign):
    (b0, c0, f0), (b1, c1, f1), (b2, c2, f2) = tables
    _modulate_kernel(work, e3, b0, c0, f0, b1, c1, f1, b2, c2, f2, sign < 0)


@numba.njit(cache=True)
def _modulate_kernel(work, e, b0, c0, f0, b1, c1, f1, b2, c2, f2, conj):
    """In-place multiply by ``prod_a exp(+-i pi e_a k_a / n_a)``."""
    n0, n1, n2 = work.shape
    for k0 in range(n0):
        p0 = c0[k0 // b0] * f0[k0 % b0] if e[0] else 1.0 + 0j
        for k1 in range(n1):
            p1 = p0 * (c1[k1 // b1] * f1[k1 % b1] if e[1] else 1.0 + 0j)
            for k2 in range(n2):
                p = p1 * (c2[k2 // b2] * f2[k2 % b2] if e[2] else 1.0 + 0j)
                if conj:
                    p = p.conjugate()
                work[k0, k1, k2] *= p


class ScratchLedger:
    """Records transient buffers allocated by :func:`g2g`, in float64 units."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, arr):
        self.current += arr.nbytes // 8
        self.peak = max(self.peak, self.current)
        return arr

    def free(self, arr):
        self.current -= arr.nbytes // 8


_KERNELS = {"cauchy_pow1": 1, "cauchy_pow2": 2}


def g2g(fields, kernel, ws: GridWorkspace, workers: int | None = None, ledger=None):
    """Apply the non-periodic kernel convolution to one or more grid fields.

    ``kernel`` is ``"cauchy_pow1"`` or ``"cauchy_pow2"`` for
    ``(1 + r**2) ** -s`` with ``s`` = 1 or 2, ``r`` the distance between
    grid nodes.  Pairs of real fields share one complex transform.
    """
    if kernel not in _KERNELS:
        raise ValueError(f"unsupported kernel {kernel!r}")
    power = _KERNELS[kernel]
    fields = np.asarray(fields, dtype=np.float64)
    single = fields.ndim == ws.dims
    d = ws.dims
    shape3 = tuple(ws.n_grid) + (1,) * (3 - d)
    f = fields.reshape((-1,) + shape3)
    nf = f.shape[0]
    ledger = ledger or ScratchLedger()
    out = np.zeros_like(f)
    work = ledger.alloc(np.empty(shape3, dtype=np.complex128))
    eig = ledger.alloc(np.empty(shape3))
    n3 = np.array(shape3, dtype=np.int64)
    h3 = np.ones(3)
    h3[:d] = ws.h
    active = np.array([a < d for a in range(3)])
    axes = tuple(range(d))
    tables = [_phase_tables(n) for n in shape3]
    for e in itertools.product((0, 1), repeat=d):
        e3 = np.zeros(3, dtype=np.int64)
        e3[:d] = e
        _combined_symbol(work, n3, h3, e3, active, power)
        work = scipy.fft.fftn(work, axes=axes, overwrite_x=True, workers=workers)
        np.copyto(eig, work.real)
        for p in range(0, nf, 2):
            work.real[...] = f[p]
            if p + 1 < nf:
                work.imag[...] = f[p + 1]
            else:
                work.imag[...] = 0.0
            if any(e):
                _modulate(work, e3, tables, 1.0)
            work = scipy.fft.fftn(work, axes=axes, overwrite_x=True, workers=workers)
            # real and imaginary views separately: a complex*real product would cast eig
            work.real[...] *= eig
            work.imag[...] *= eig
            work = scipy.fft.ifftn(work, axes=axes, overwrite_x=True, workers=workers)
            if any(e):
                _modulate(work, e3, tables, -1.0)
            out[p] += work.real
            if p + 1 < nf:
                out[p + 1] += work.imag
    ledger.free(work)
    ledger.free(eig)
    out *= 1.0 / 2**d
    out = out.reshape((nf,) + tuple(ws.n_grid))
    return out[0] if single else out


def repulsive_sorted(Ys, ws: GridWorkspace, workers: int | None = None):
    """Repulsive forces and Z for points already in the workspace's sorted order."""
    n, d = Ys.shape
    # centering keeps y_i * sum(w^2) - sum(w^2 y) well conditioned
    center = 0.5 * (ws.box_lo + ws.box_hi)
    yc = Ys - center
    vals = np.empty((n, d + 1))
    vals[:, 0] = 1.0
    vals[:, 1:] = yc
    grid = s2g(vals, ws)
    conv2 = g2g(grid, "cauchy_pow2", ws, workers=workers)
    conv1 = g2g(grid[0], "cauchy_pow1", ws, workers=workers)
    phi2 = g2s(conv2, ws)
    phi1 = g2s(conv1, ws)
    # the self pair contributes w_ii = 1 to both sums and nothing to the force
    z = float(phi1.sum() - n)
    force = yc * phi2[:, :1] - phi2[:, 1:]
    return force * (4.0 / z), z


def repulsive_term(Y, ws: GridWorkspace, workers: int | None = None) -> RepulsiveResult:
    """Approximate ``(4/Z) sum_j w_ij**2 (y_i - y_j)`` and ``Z`` on the grid.

    ``ws`` must have been binned for ``Y``; the forces are returned in the
    order of ``Y``.
    """
    Y = _check_points(Y)
    if ws.point_perm is None or ws.point_perm.shape[0] != Y.shape[0]:
        raise RuntimeError("workspace has not been binned for these points")
    frep_s, z = repulsive_sorted(ws.sorted_points, ws, workers=workers)
    frep = np.empty_like(frep_s)
    frep[ws.point_perm] = frep_s
    return RepulsiveResult(frep=frep, z=z)


def grid_repulsion(Y, cfg: GridConfig | None = None, workers: int | None = None) -> RepulsiveResult:
    """Convenience wrapper: set up, bin and evaluate in one call."""
    ws = setup_grid(Y, cfg)
    bin_points(Y, ws)
    return repulsive_term(Y, ws, workers=workers)
