"""Gradient-descent embedding loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import nuconv, oracle
from .attractive import ReorderedMatrix, TranslocationPlan, attractive_term, reorder_bsdb, translocate
from .graph_core import JointDistribution

log = logging.getLogger(__name__)

INIT_SCALE = {"uniform": 1.0, "gaussian": 1e-4}
KL_EXACT_CAP = 20_000
REPULSION_MODES = ("auto", "grid", "exact")
# below this size the all-pairs sum is cheaper than any grid and has no
# spacing-related error
AUTO_EXACT_BELOW = 2048


EMBED_MAX_PER_AXIS = {1: 4096, 2: 512, 3: 96}


def embedding_grid(d: int = 2) -> nuconv.GridConfig:
    """Grid preset for the optimization loop.

    Coarser than the accuracy-oriented :class:`~sgtsne.nuconv.GridConfig`
    default: at most 10 cells across the data extent and never finer than
    needed for unit spacing, with cubic interpolation (see README for the
    measured force error).  Widely spread layouts hit the per-axis cap and
    get a coarser spacing instead of a larger grid.
    """
    return nuconv.GridConfig(h_max=1.0, cells_per_extent=10, interp_order=3,
                             max_per_axis=EMBED_MAX_PER_AXIS[d])


class EmbeddingDivergedError(FloatingPointError):
    def __init__(self, iteration, max_grad):
        self.iteration = iteration
        self.max_grad = max_grad
        super().__init__(f"non-finite state at iteration {iteration} (max |grad| = {max_grad:.3e})")


@dataclass
class EmbedConfig:
    d: int = 2
    max_iter: int = 1000
    early_exag_iter: int = 250
    alpha: float = 12.0
    eta: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch_iter: int | None = None
    init: str = "uniform"
    init_scale: float | None = None
    seed: int = 0
    kl_log_every: int = 50
    reorder: str = "bfs-rcm"
    block_size: int = 256
    labels: np.ndarray | None = None
    grid: nuconv.GridConfig | None = None
    repulsion: str = "auto"
    workers: int | None = None

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError("embedding dimension must be 1, 2 or 3")
        if self.max_iter < 0 or not 0 <= self.early_exag_iter <= self.max_iter:
            raise ValueError("need 0 <= early_exag_iter <= max_iter")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.init not in INIT_SCALE:
            raise ValueError(f"unknown init {self.init!r}")
        if self.kl_log_every < 1:
            raise ValueError("kl_log_every must be >= 1")
        if self.repulsion not in REPULSION_MODES:
            raise ValueError(f"unknown repulsion mode {self.repulsion!r}")
        if self.grid is None:
            self.grid = embedding_grid(self.d)

    @property
    def scale(self) -> float:
        return INIT_SCALE[self.init] if self.init_scale is None else self.init_scale

    @property
    def switch_iter(self) -> int:
        return self.early_exag_iter if self.momentum_switch_iter is None else self.momentum_switch_iter


@dataclass
class EmbeddingState:
    y: np.ndarray
    velocity: np.ndarray
    gains: np.ndarray
    iter: int = 0


@dataclass
class StepStats:
    iter: int
    z: float
    grad_norm: float
    exaggeration: float


@dataclass
class EmbedResult:
    y: np.ndarray
    kl_trace: list
    stats: list
    order: np.ndarray
    elapsed: float


def initialize(n: int, cfg: EmbedConfig) -> EmbeddingState:
    if n < 2:
        raise ValueError("need at least two vertices")
    rng = np.random.default_rng(cfg.seed)
    if cfg.init == "uniform":
        y = rng.uniform(-cfg.scale, cfg.scale, size=(n, cfg.d))
    else:
        y = rng.normal(0.0, cfg.scale, size=(n, cfg.d))
    return EmbeddingState(y=y, velocity=np.zeros_like(y), gains=np.ones_like(y))


class GradientEngine:
    """Computes the gradient for coordinates held in the sparse order."""

    def __init__(self, R: ReorderedMatrix, cfg: EmbedConfig):
        self.R = R
        self.cfg = cfg
        mode = cfg.repulsion
        if mode == "auto":
            mode = "exact" if R.n < AUTO_EXACT_BELOW else "grid"
        self.exact = mode == "exact"

    def repulsive(self, y):
        if self.exact:
            rep, z = oracle.exact_repulsion(y)
            return rep * (4.0 / z), z
        ws = nuconv.setup_grid(y, self.cfg.grid)
        nuconv.bin_points(y, ws)
        plan = TranslocationPlan(self.R, ws)
        y_grid = translocate(y, "sparse", "grid", plan)
        frep_grid, z = nuconv.repulsive_sorted(y_grid, ws, workers=self.cfg.workers)
        return translocate(frep_grid, "grid", "sparse", plan), z

    def __call__(self, y, exaggeration):
        att = attractive_term(self.R, y, exaggeration)
        frep, z = self.repulsive(y)
        return att - frep, z


def step(state: EmbeddingState, engine: GradientEngine, cfg: EmbedConfig) -> StepStats:
    """One momentum/gains update in place; returns the iteration statistics."""
    it = state.iter
    alpha = cfg.alpha if it < cfg.early_exag_iter else 1.0
    momentum = cfg.momentum_early if it < cfg.switch_iter else cfg.momentum_late
    grad, z = engine(state.y, alpha)
    if not np.all(np.isfinite(grad)):
        finite = grad[np.isfinite(grad)]
        raise EmbeddingDivergedError(it, float(np.abs(finite).max()) if finite.size else float("nan"))
    flip = np.sign(grad) != np.sign(state.velocity)
    state.gains = np.where(flip, state.gains + 0.2, state.gains * 0.8)
    np.maximum(state.gains, 0.01, out=state.gains)
    state.velocity = momentum * state.velocity - cfg.eta * state.gains * grad
    state.y = state.y + state.velocity
    state.y -= state.y.mean(axis=0)
    if not np.all(np.isfinite(state.y)):
        raise EmbeddingDivergedError(it, float(np.abs(grad).max()))
    state.iter = it + 1
    return StepStats(iter=it, z=z, grad_norm=float(np.linalg.norm(grad)), exaggeration=alpha)


def kl_value(P: JointDistribution, y, z_estimate=None):
    """``(kl, estimator)``; exact below the cap, grid-Z estimate above it."""
    if P.n <= KL_EXACT_CAP or z_estimate is None:
        return oracle.kl_divergence(P, y), "exact"
    return oracle.kl_from_z(P, y, z_estimate), "grid-z"


def run(P: JointDistribution, cfg: EmbedConfig, callback=None) -> EmbedResult:
    """Embed ``P``; coordinates are returned in the original vertex order.

    The KL trace holds ``(iteration, kl, estimator)`` at iteration 0, every
    ``kl_log_every`` iterations and at the end.
    """
    t0 = time.perf_counter()
    R = reorder_bsdb(P, cfg.reorder, labels=cfg.labels, block_size=cfg.block_size)
    state = initialize(P.n, cfg)
    # the initial layout is drawn in original order, then moved into sparse order
    state.y = state.y[R.order]
    state.y -= state.y.mean(axis=0)
    engine = GradientEngine(R, cfg)
    Pp = R.P_perm

    def record():
        z_est = None
        if Pp.n > KL_EXACT_CAP:
            z_est = engine.repulsive(state.y)[1]
        kl, how = kl_value(Pp, state.y, z_est)
        trace.append((state.iter, kl, how))

    trace = []
    stats = []
    record()
    for _ in range(cfg.max_iter):
        s = step(state, engine, cfg)
        stats.append(s)
        done = state.iter == cfg.max_iter
        if state.iter % cfg.kl_log_every == 0 or done:
            record()
            log.info("iter %d  kl %.6f  z %.4g  |grad| %.3g", state.iter, trace[-1][1], s.z, s.grad_norm)
        if callback is not None:
            callback(state, s)
    y = np.empty_like(state.y)
    y[R.order] = state.y
    return EmbedResult(y=y, kl_trace=trace, stats=stats, order=R.order,
                       elapsed=time.perf_counter() - t0)
