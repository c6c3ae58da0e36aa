"""Discretized comparison solver: FISTA on jumps restricted to a uniform grid.

Jumps may only sit at the interior nodes ``t_i = i h``, ``i = 1..N_h - 1``,
``h = T / N_h``.  Each node carries a vector ``mu_i`` in ``R^d`` and the
problem becomes

    min  1/2 |G x - y_d|^2 + beta sum_i |mu_i|,    x = (mu_1, ..., mu_{N_h-1}, c),

which is solved with constant step ``1/L_h`` and the group soft-threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bv_core import ActiveSet, BvCurve
from .forward_models import ForwardModel, QuadraticLoss
from .pdaj import IterationRecord

__all__ = [
    "GridProblem",
    "FistaState",
    "FistaResult",
    "discretize",
    "power_iteration",
    "prox_group",
    "grid_objective",
    "run_fista",
    "grid_curve",
]


def power_iteration(M: np.ndarray, rtol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of the symmetric positive semidefinite ``M``."""
    n = M.shape[0]
    if n == 0:
        return 0.0
    # deterministic start with no special alignment to the eigenvectors
    x = np.cos(np.arange(1, n + 1) * 0.7) + 1.5
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = M @ x
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        lam_new = float(x @ y)
        x = y / nrm
        if abs(lam_new - lam) <= rtol * abs(lam_new):
            return lam_new
        lam = lam_new
    return lam


@dataclass(frozen=True, eq=False)
class GridProblem:
    """Grid-restricted problem data.

    ``response`` has ``(N_h - 1) d`` node columns (node-major, axis-minor)
    followed by ``d`` offset columns.
    """

    nodes: np.ndarray
    response: np.ndarray
    target: np.ndarray
    beta: float
    dim: int
    horizon: float
    lipschitz: float

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def h(self) -> float:
        return self.horizon / (self.n_nodes + 1)

    def split(self, x):
        nd = self.n_nodes * self.dim
        return x[:nd].reshape(self.n_nodes, self.dim), x[nd:]


def discretize(model: ForwardModel, loss: QuadraticLoss, beta: float, n_h: int) -> GridProblem:
    """Assemble the grid problem with ``n_h`` cells (``n_h - 1`` interior nodes)."""
    if n_h < 2:
        raise ValueError("N_h must be at least 2")
    T, d = model.horizon, model.dim
    nodes = T * np.arange(1, n_h) / n_h
    pos = np.repeat(nodes, d)
    dirs = np.tile(np.eye(d), (nodes.size, 1))
    G = np.hstack([model.atom_response(pos, dirs), model.offset_response()])
    if not np.all(np.isfinite(G)):
        raise ValueError("response matrix has non-finite entries")
    L = power_iteration(G.T @ G)
    return GridProblem(nodes, G, np.asarray(loss.target, float), float(beta), d, T, L)


def prox_group(z: np.ndarray, threshold: float, dim: int, n_nodes: int) -> np.ndarray:
    """Group soft-threshold of the node blocks; the offset block is unchanged."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    out = np.array(z, dtype=float)
    nd = n_nodes * dim
    blocks = out[:nd].reshape(n_nodes, dim)
    norms = np.linalg.norm(blocks, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > threshold, 1.0 - threshold / norms, 0.0)
    out[:nd] = (blocks * scale[:, None]).reshape(-1)
    return out


def grid_objective(problem: GridProblem, x) -> float:
    r = problem.response @ x - problem.target
    blocks, _ = problem.split(x)
    return 0.5 * float(r @ r) + problem.beta * float(np.linalg.norm(blocks, axis=1).sum())


def grid_curve(problem: GridProblem, x) -> BvCurve:
    """The BV curve with jumps ``mu_i`` at the nodes and mean ``c``."""
    blocks, c = problem.split(np.asarray(x, float))
    norms = np.linalg.norm(blocks, axis=1)
    keep = norms > 0.0
    dirs = blocks[keep] / norms[keep, None]
    aset = ActiveSet(problem.nodes[keep], dirs, norms[keep], dim=problem.dim)
    return BvCurve(aset, c, problem.horizon)


@dataclass
class FistaState:
    x: np.ndarray
    momentum: np.ndarray
    k: int
    t: float
    step: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("stepsize must be positive")


@dataclass
class FistaResult:
    state: FistaState
    trace: list = field(default_factory=list)


def run_fista(
    problem: GridProblem,
    iterations: int,
    record_every: int = 1,
    x0=None,
) -> FistaResult:
    """FISTA with step ``1/L_h`` and ``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2``.

    The trace holds :class:`IterationRecord` rows for ``k = 1`` (the start)
    and every ``record_every``-th iterate after it; ``j`` and ``jhat`` both
    carry the grid objective, which is recorded as is (FISTA is not
    monotone).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    n = problem.response.shape[1]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    L = problem.lipschitz if problem.lipschitz > 0 else 1.0
    state = FistaState(x=x, momentum=x.copy(), k=0, t=1.0, step=1.0 / L)
    G, y = problem.response, problem.target
    tau_beta = problem.beta * state.step
    trace = []
    clock = [time.perf_counter()]

    def record(k, x):
        blocks, _ = problem.split(x)
        val = grid_objective(problem, x)
        active = int(np.count_nonzero(np.linalg.norm(blocks, axis=1)))
        now = time.perf_counter()
        ms = 1e3 * (now - clock[0])
        clock[0] = now
        trace.append(IterationRecord(k, val, val, float("nan"), float("nan"), active, float("nan"), 0, ms))

    record(1, x)
    z, t = state.momentum, state.t
    for it in range(1, iterations + 1):
        grad = G.T @ (G @ z - y)
        x_new = prox_group(z - state.step * grad, tau_beta, problem.dim, problem.n_nodes)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if it % record_every == 0:
            record(it + 1, x)
    state.x, state.momentum, state.k, state.t = x, z, iterations, t
    return FistaResult(state, trace)
