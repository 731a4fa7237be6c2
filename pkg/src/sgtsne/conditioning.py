"""Per-vertex conditioning of the input graph.

Two routes produce the stochastic matrix that enters the objective:

``rescale``
    finds ``gamma_i >= 0`` with ``sum_j phi(p_{j|i} ** gamma_i) = lam`` and
    replaces each weight by ``phi(p_{j|i} ** gamma_i) / lam``.
``perplexity_equalize``
    turns squared kNN distances into Gaussian conditionals whose entropy is
    ``log(u)`` at every vertex.

Both solve one monotone scalar equation per row.  All rows are bracketed
and bisected together with segment sums, then polished with a few
safeguarded Newton steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .graph_core import KnnDistances, SparseConditionalMatrix, _segment_sums

log = logging.getLogger(__name__)


class InfeasibleRowError(ValueError):
    def __init__(self, vertices, reason):
        self.vertices = list(int(v) for v in vertices)
        shown = ", ".join(str(v) for v in self.vertices[:10])
        more = "" if len(self.vertices) <= 10 else f" (+{len(self.vertices) - 10} more)"
        super().__init__(f"{reason}; infeasible vertices: {shown}{more}")


class ConvergenceError(RuntimeError):
    pass


class IdentityKernel:
    """``phi(x) = x``."""

    name = "identity"

    def __call__(self, x):
        return x

    def derivative(self, x):
        return np.ones_like(x)

    @property
    def at_zero(self) -> float:
        return 0.0


KERNELS = {"identity": IdentityKernel()}


@dataclass(frozen=True)
class RescalingConfig:
    lam: float
    kernel: str = "identity"
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown rescaling kernel {self.kernel!r}")


@dataclass(frozen=True)
class PerplexityConfig:
    perplexity: float
    # bisection stops just inside tol, so keep it below the 1e-8 target
    tol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        if not self.perplexity > 0:
            raise ValueError("perplexity must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def _rows_of(starts):
    return np.repeat(np.arange(starts.shape[0] - 1), np.diff(starts))


def _gamma_rows(logp, starts, lam, kernel, tol, max_iter, targets=None):
    """Vectorized gamma solve for the rows listed in ``targets``.

    Returns ``(gamma, residual)`` arrays over ``targets``.
    """
    n_all = starts.shape[0] - 1
    targets = np.arange(n_all) if targets is None else targets
    # compact copy of the selected rows
    lens = np.diff(starts)[targets]
    sub_starts = np.zeros(targets.size + 1, dtype=np.int64)
    np.cumsum(lens, out=sub_starts[1:])
    if targets.size < n_all:
        chosen = np.zeros(n_all, dtype=bool)
        chosen[targets] = True
        take = np.flatnonzero(chosen[_rows_of(starts)])
    else:
        take = np.arange(logp.size)
    lp = logp[take]
    rid = _rows_of(sub_starts)

    def resid(g):
        return _segment_sums(kernel(np.exp(g[rid] * lp)), sub_starts) - lam

    def slope(g):
        x = np.exp(g[rid] * lp)
        return _segment_sums(kernel.derivative(x) * x * lp, sub_starts)

    m = targets.size
    lo = np.zeros(m)
    hi = np.ones(m)
    f_lo = resid(lo)
    f_hi = resid(hi)
    done_lo = np.abs(f_lo) <= tol
    # expand the upper end until the residual turns negative
    for _ in range(max_iter):
        grow = (f_hi > 0) & ~done_lo
        if not grow.any():
            break
        lo[grow] = hi[grow]
        f_lo[grow] = f_hi[grow]
        hi[grow] *= 2.0
        f_hi = resid(hi)
    else:
        raise ConvergenceError("could not bracket the rescaling exponent")
    gamma = np.where(done_lo, 0.0, np.where(np.abs(f_hi) <= tol, hi, 0.5 * (lo + hi)))
    f = resid(gamma)
    active = (np.abs(f) > tol) & ~done_lo
    it = 0
    while active.any():
        it += 1
        if it > max_iter:
            raise ConvergenceError(f"bisection did not reach tol={tol} in {max_iter} iterations")
        pos = f > 0
        lo = np.where(active & pos, gamma, lo)
        hi = np.where(active & ~pos, gamma, hi)
        gamma = np.where(active, 0.5 * (lo + hi), gamma)
        f = resid(gamma)
        active = (np.abs(f) > tol) & ~done_lo
    # Newton polish inside the final bracket
    for _ in range(4):
        s = slope(gamma)
        ok = (s < 0) & ~done_lo & (f != 0)
        if not ok.any():
            break
        step = np.where(ok, f / np.where(ok, s, 1.0), 0.0)
        cand = gamma - step
        cand = np.where((cand >= lo) & (cand <= hi), cand, gamma)
        f_c = resid(cand)
        better = np.abs(f_c) < np.abs(f)
        gamma = np.where(better, cand, gamma)
        f = np.where(better, f_c, f)
    return gamma, f


def solve_gamma(row_values, lam: float, kernel: str = "identity", tol: float = 1e-8,
                max_iter: int = 200) -> float:
    """Rescaling exponent for one row of conditional probabilities."""
    p = np.asarray(row_values, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p <= 0) or np.any(p > 1):
        raise ValueError("row values must be probabilities in (0, 1]")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    phi = KERNELS[kernel]
    _check_feasible(np.array([p.size]), np.array([np.any(p == 1.0)]), lam, phi, np.array([0]))
    starts = np.array([0, p.size], dtype=np.int64)
    gamma, _ = _gamma_rows(np.log(p), starts, lam, phi, tol, max_iter)
    return float(gamma[0])


def _check_feasible(deg, has_one, lam, phi, vertex_ids):
    upper = deg * phi(1.0)
    lower = deg * phi.at_zero
    over = lam > upper * (1 + 1e-15)
    under = lam <= lower
    single = has_one & (deg == 1) & (lam != 1.0)
    bad = over | under | single
    if bad.any():
        raise InfeasibleRowError(vertex_ids[bad], f"lambda={lam} is not attainable")


def rescale(Pc: SparseConditionalMatrix, cfg: RescalingConfig, return_gamma: bool = False):
    """Reshape and rescale every row so that its kernel sum equals ``lam``.

    Degree-1 rows admit only the weight 1; for ``lam != 1`` they are kept
    unchanged and counted in a warning.
    """
    phi = KERNELS[cfg.kernel]
    lam = cfg.lam
    deg = Pc.degrees
    leaf = deg == 1
    solve = np.flatnonzero(~leaf) if lam != 1.0 else np.arange(Pc.n)
    _check_feasible(deg[solve], np.zeros(solve.size, dtype=bool), lam, phi, solve)
    gamma = np.zeros(Pc.n)
    if lam == 1.0:
        gamma[:] = 1.0
    logp = np.log(Pc.values)
    if solve.size and lam != 1.0:
        g, _ = _gamma_rows(logp, Pc.row_starts, lam, phi, cfg.tol, cfg.max_iter, targets=solve)
        gamma[solve] = g
    rid = Pc.row_ids()
    if lam == 1.0:
        values = Pc.values.copy()
    else:
        values = phi(np.exp(gamma[rid] * logp)) / lam
        if leaf.any():
            log.warning("kept %d degree-1 rows unchanged (lambda=%g)", int(leaf.sum()), lam)
            values[leaf[rid]] = 1.0
    out = Pc.with_values(values)
    return (out, gamma) if return_gamma else out


def _row_entropy(d0, rid, starts, beta):
    """Entropy and normalized weights of Gaussian rows ``exp(-beta d0)``."""
    e = np.exp(-beta[rid] * d0)
    s = _segment_sums(e, starts)
    p = e / s[rid]
    # H = log s + beta <d0>
    mean_d = _segment_sums(p * d0, starts)
    return np.log(s) + beta * mean_d, p


def perplexity_equalize(knn: KnnDistances, cfg: PerplexityConfig, return_sigma: bool = False):
    """Gaussian conditionals with per-row entropy ``log(perplexity)``.

    Rows whose smallest attainable entropy already exceeds the target (for
    instance all distances equal) get the small-bandwidth limit, i.e. uniform
    weights over the nearest distance ties.
    """
    u = cfg.perplexity
    deg = knn.degrees
    bad = np.flatnonzero(u >= deg)
    if bad.size:
        raise InfeasibleRowError(bad, f"perplexity {u} requires degree > perplexity")
    starts = knn.row_starts
    rid = _rows_of(starts)
    d = knn.values.astype(np.float64)
    dmin = np.full(knn.n, np.inf)
    np.minimum.at(dmin, rid, d)
    d0 = d - dmin[rid]
    target = np.log(u)
    # bisection on log(sigma) over [1e-20, sigma_hi]
    scale = np.maximum(_segment_sums(d0, starts) / deg, 1e-300)
    lo = np.full(knn.n, np.log(1e-20))
    hi = np.log(np.sqrt(scale))

    def entropy_at(logsig):
        beta = 0.5 * np.exp(-2.0 * logsig)
        return _row_entropy(d0, rid, starts, beta)

    h_lo, _ = entropy_at(lo)
    h_hi, _ = entropy_at(hi)
    limit = h_lo >= target - cfg.tol
    for _ in range(cfg.max_iter):
        grow = (h_hi < target) & ~limit
        if not grow.any():
            break
        lo[grow] = hi[grow]
        hi[grow] += np.log(2.0)
        h_hi, _ = entropy_at(hi)
    else:
        raise ConvergenceError("could not bracket sigma")
    logsig = 0.5 * (lo + hi)
    h, p = entropy_at(logsig)
    active = (np.abs(h - target) > cfg.tol) & ~limit
    it = 0
    while active.any():
        it += 1
        if it > cfg.max_iter:
            raise ConvergenceError(f"sigma bisection did not reach tol={cfg.tol}")
        below = h < target
        lo = np.where(active & below, logsig, lo)
        hi = np.where(active & ~below, logsig, hi)
        logsig = np.where(active, 0.5 * (lo + hi), logsig)
        h, p = entropy_at(logsig)
        active = (np.abs(h - target) > cfg.tol) & ~limit
    if limit.any():
        log.warning("%d rows cannot reach perplexity %g; using the nearest-tie limit", int(limit.sum()), u)
        ties = (d0 == 0.0).astype(np.float64)
        cnt = _segment_sums(ties, starts)
        sel = limit[rid]
        p[sel] = (ties / cnt[rid])[sel]
        logsig[limit] = -np.inf
    # far neighbors may underflow; stored weights stay strictly positive
    p = np.maximum(p, np.finfo(np.float64).tiny)
    out = SparseConditionalMatrix(knn.n, knn.row_starts, knn.col_indices, p)
    return (out, np.exp(logsig)) if return_sigma else out
