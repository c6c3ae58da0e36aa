"""Primal-dual active jump method.

Each iteration builds the dual ``p_k = int_0^. K^* grad F(K u_k)``, locates a
global maximizer of ``|p_k|``, inserts a jump there in direction
``p_k / |p_k|``, re-optimizes all magnitudes and the offset, and drops jumps
whose magnitude vanished.  The loop stops when ``|p_k|_inf <= beta`` or when
the certified gap ``Phi_k = (jhat_k / beta) (|p_k|_inf - beta)`` drops below
``tol_phi``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bv_core import ActiveSet, BvCurve, tv_seminorm
from .forward_models import DualFunction, ForwardModel, QuadraticLoss
from .subproblem import SubproblemFailure, SubproblemInstance, solve_magnitudes

__all__ = [
    "PdajConfig",
    "IterationRecord",
    "PdajState",
    "Candidate",
    "RunResult",
    "DegenerateDualError",
    "find_candidate",
    "residual_bound",
    "evaluate_state",
    "step",
    "run",
    "TRACE_HEADER",
    "trace_to_csv",
]

log = logging.getLogger(__name__)

TRACE_HEADER = ["k", "j", "jhat", "phi", "p_inf", "active_size", "t_hat", "sub_iters", "ms"]
PRESCAN_NODES = 1000
NEWTON_STEPS = 60


class DegenerateDualError(ValueError):
    """The dual vanishes identically, so no jump direction is defined."""


@dataclass(frozen=True)
class PdajConfig:
    beta: float
    tol_phi: float = 1e-13
    max_iter: int = 100
    n_starts: int = 9
    prune_eps: float = 1e-14
    merge_eps: Optional[float] = None
    boundary_eps: Optional[float] = None
    search_mode: str = "continuous"
    grid_nodes: Optional[tuple] = None
    sub_tol: Optional[float] = None
    merge_coincident: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        for name in ("tol_phi", "prune_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_starts < 2:
            raise ValueError("n_starts must be >= 2")
        if self.search_mode not in ("continuous", "grid"):
            raise ValueError("search_mode must be 'continuous' or 'grid'")
        if self.search_mode == "grid" and (self.grid_nodes is None or len(self.grid_nodes) == 0):
            raise ValueError("grid search requires grid_nodes")
        if self.grid_nodes is not None:
            object.__setattr__(self, "grid_nodes", tuple(float(t) for t in self.grid_nodes))

    def merge_tol(self, T: float) -> float:
        return 1e-12 * T if self.merge_eps is None else self.merge_eps

    def boundary_tol(self, T: float) -> float:
        return 1e-9 * T if self.boundary_eps is None else self.boundary_eps


@dataclass(frozen=True)
class IterationRecord:
    k: int
    j: float
    jhat: float
    phi: float
    p_inf: float
    active_size: int
    t_hat: float
    sub_iters: int
    ms: float


@dataclass(frozen=True, eq=False)
class PdajState:
    curve: BvCurve
    y: np.ndarray
    F: float
    dual: DualFunction
    jhat: float
    j: float


@dataclass(frozen=True)
class Candidate:
    position: float
    direction: np.ndarray
    p_inf: float


@dataclass
class RunResult:
    solution: BvCurve
    trace: list
    status: str
    initial_jhat: float = float("nan")
    message: str = ""
    states: list = field(default_factory=list, repr=False)

    def __iter__(self):
        return iter((self.solution, self.trace, self.status))


def evaluate_state(curve: BvCurve, model: ForwardModel, loss: QuadraticLoss, beta: float) -> PdajState:
    y = model.forward(curve)
    F = loss.value(y)
    p = model.dual(loss.gradient(y))
    return PdajState(
        curve=curve,
        y=y,
        F=F,
        dual=p,
        jhat=F + beta * float(np.sum(curve.magnitudes)),
        j=F + beta * tv_seminorm(curve),
    )


def _newton_polish(dual: DualFunction, t0: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Ascend ``|p|^2`` from every start with a safeguarded Newton iteration."""
    T = dual.horizon
    t = np.clip(t0, lo, hi)
    max_step = T / 20.0
    for _ in range(NEWTON_STEPS):
        p, dp, ddp = dual.value(t), dual.derivative(t), dual.second_derivative(t)
        g1 = np.sum(p * dp, axis=1)
        g2 = np.sum(dp * dp, axis=1) + np.sum(p * ddp, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = -g1 / g2
        step = np.where(g2 < 0.0, newton, np.sign(g1) * 1e-3 * T)
        step = np.clip(np.nan_to_num(step), -max_step, max_step)
        t_new = np.clip(t + step, lo, hi)
        moved = np.abs(t_new - t)
        t = t_new
        if np.all(moved <= 1e-15 * T):
            break
    return t


def _pick(ts: np.ndarray, vals: np.ndarray):
    best = vals.max()
    return float(ts[vals == best].min()), float(best)


def find_candidate(dual: DualFunction, config: PdajConfig) -> Candidate:
    """Locate ``t_hat`` maximizing ``|p|`` and the unit direction ``p(t_hat)/|p(t_hat)|``."""
    T = dual.horizon
    eps = config.boundary_tol(T)
    lo, hi = eps, T - eps
    if config.search_mode == "grid":
        ts = np.asarray(config.grid_nodes, float)
        ts = ts[(ts > 0.0) & (ts < T)]
    elif dual.has_second_derivative:
        starts = T * np.arange(1, config.n_starts + 1) / (config.n_starts + 1)
        scan = np.linspace(lo, hi, PRESCAN_NODES)
        nv = dual.norm(scan)
        inner = (nv[1:-1] >= nv[:-2]) & (nv[1:-1] >= nv[2:])
        peaks = scan[1:-1][inner]
        ends = scan[[0, -1]]
        ts = np.concatenate([_newton_polish(dual, np.concatenate([starts, peaks]), lo, hi), ends])
    elif dual.breakpoints is not None:
        # piecewise linear dual: extrema of |p| sit on breakpoints or the ends
        ts = np.concatenate([np.clip(dual.breakpoints, lo, hi), [lo, hi]])
    else:
        ts = np.linspace(lo, hi, 100 * PRESCAN_NODES)
    vals = dual.norm(ts)
    t_hat, p_inf = _pick(ts, vals)
    if p_inf == 0.0:
        raise DegenerateDualError("dual vanishes at every probed point")
    p = dual.value(t_hat)
    return Candidate(t_hat, p / np.linalg.norm(p), p_inf)


def residual_bound(jhat: float, p_inf: float, beta: float) -> float:
    """Certified bound ``(jhat / beta) (p_inf - beta)`` on ``j(u_k) - min j``; clipped at 0."""
    return max(0.0, (jhat / beta) * (p_inf - beta))


@dataclass
class StepOutcome:
    state: PdajState
    candidate: Optional[Candidate]
    phi: float
    status: Optional[str]
    sub_iters: int = 0


def _solve(curve_atoms, warm, model, loss, config) -> tuple:
    pos, dirs, mu0, c0 = curve_atoms
    inst = SubproblemInstance(pos, dirs, model, loss, config.beta)
    sol = solve_magnitudes(inst, warm_start=(mu0, c0) if warm else None, tol=config.sub_tol)
    keep = sol.magnitudes > config.prune_eps
    aset = ActiveSet(pos[keep], dirs[keep], sol.magnitudes[keep], dim=model.dim)
    return BvCurve(aset, sol.offset, model.horizon), sol


def _merge_coincident(curve: BvCurve, tol: float):
    """Sum atoms whose positions agree within ``tol`` into one jump vector.

    Returns ``None`` when no two atoms coincide.
    """
    pos = curve.positions
    if pos.size < 2 or not np.any(np.diff(pos) <= tol):
        return None
    w = curve.active_set.weights
    groups = np.concatenate([[0], np.cumsum(np.diff(pos) > tol)])
    new_pos, new_w = [], []
    for g in range(groups[-1] + 1):
        members = groups == g
        total = w[members].sum(axis=0)
        if np.linalg.norm(total) > 0.0:
            mags = curve.magnitudes[members]
            new_pos.append(pos[members][np.argmax(mags)])
            new_w.append(total)
    new_w = np.array(new_w).reshape(-1, curve.dim)
    mags = np.linalg.norm(new_w, axis=1)
    return np.array(new_pos), new_w / mags[:, None], mags


def step(state: PdajState, model: ForwardModel, loss: QuadraticLoss, config: PdajConfig) -> StepOutcome:
    """One outer iteration starting from ``state`` (which must already be optimal
    for its own active set).

    Returns the outcome with ``status`` set when ``state`` is terminal.
    """
    beta = config.beta
    try:
        cand = find_candidate(state.dual, config)
    except DegenerateDualError:
        return StepOutcome(state, None, 0.0, "optimal_exact")
    phi = residual_bound(state.jhat, cand.p_inf, beta)
    if cand.p_inf <= beta:
        return StepOutcome(state, cand, phi, "optimal_exact")
    if phi <= config.tol_phi:
        return StepOutcome(state, cand, phi, "optimal_phi")
    curve = state.curve
    T = model.horizon
    near = np.abs(curve.positions - cand.position) <= config.merge_tol(T)
    if near.any():
        same = np.linalg.norm(curve.directions[near] - cand.direction, axis=1) <= 1e-8
        if same.any():
            return StepOutcome(state, cand, phi, "optimal_exact")

    pos = np.append(curve.positions, cand.position)
    dirs = np.vstack([curve.directions, cand.direction[None, :]])
    mu0 = np.append(curve.magnitudes, 0.0)
    new_curve, sol = _solve((pos, dirs, mu0, curve.mean), True, model, loss, config)
    sub_iters = sol.newton_iterations
    merged = _merge_coincident(new_curve, config.merge_tol(T)) if config.merge_coincident else None
    if merged is not None:
        # the summed vector keeps the fit and lowers sum(mu); re-optimize the magnitudes
        m_pos, m_dirs, m_mu = merged
        new_curve, sol = _solve((m_pos, m_dirs, m_mu, new_curve.mean), True, model, loss, config)
        sub_iters += sol.newton_iterations
    new_state = evaluate_state(new_curve, model, loss, beta)
    if new_state.jhat >= state.jhat:
        # inserting an ascent atom strictly lowers jhat in exact arithmetic, so
        # this only happens once the iterate is optimal to working precision
        log.info("no decrease of jhat (%.3e); stopping", new_state.jhat - state.jhat)
        return StepOutcome(state, cand, phi, "stalled", sub_iters)
    return StepOutcome(new_state, cand, phi, None, sub_iters)


def run(
    model: ForwardModel,
    loss: QuadraticLoss,
    config: PdajConfig,
    initial: Optional[BvCurve] = None,
    keep_states: bool = False,
) -> RunResult:
    """Run the active jump method from ``initial`` (default: the zero curve).

    Returns a :class:`RunResult` that unpacks as ``(solution, trace, status)``.
    ``status`` is one of ``optimal_exact``, ``optimal_phi``, ``max_iter``,
    ``stalled`` or ``solver_failure``.
    """
    if initial is None:
        initial = BvCurve.constant(np.zeros(model.dim), model.horizon)
    beta = config.beta
    jhat0 = evaluate_state(initial, model, loss, beta).jhat
    trace: list[IterationRecord] = []
    states = []

    t0 = time.perf_counter()
    try:
        curve, sol = _solve(
            (initial.positions, initial.directions, initial.magnitudes, initial.mean),
            True, model, loss, config,
        )
    except SubproblemFailure as exc:
        return RunResult(initial, trace, "solver_failure", jhat0, str(exc))
    state = evaluate_state(curve, model, loss, beta)
    sub_iters = sol.newton_iterations
    k = 1
    while True:
        if keep_states:
            states.append(state)
        try:
            out = step(state, model, loss, config)
        except SubproblemFailure as exc:
            return RunResult(state.curve, trace, "solver_failure", jhat0, str(exc), states)
        cand = out.candidate
        ms = 1e3 * (time.perf_counter() - t0)
        trace.append(
            IterationRecord(
                k=k,
                j=state.j,
                jhat=state.jhat,
                phi=out.phi,
                p_inf=cand.p_inf if cand else 0.0,
                active_size=len(state.curve.active_set),
                t_hat=cand.position if cand else float("nan"),
                sub_iters=sub_iters,
                ms=ms,
            )
        )
        if out.status is not None:
            return RunResult(state.curve, trace, out.status, jhat0, states=states)
        if k >= config.max_iter:
            return RunResult(state.curve, trace, "max_iter", jhat0, states=states)
        t0 = time.perf_counter()
        state, sub_iters = out.state, out.sub_iters
        k += 1


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def trace_to_csv(trace, include_timings: bool = False) -> str:
    """Render a trace with the fixed header.  ``ms`` is left empty unless
    ``include_timings`` so that repeated runs produce identical bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in trace:
        row = [_fmt(r.k), _fmt(r.j), _fmt(r.jhat), _fmt(r.phi), _fmt(r.p_inf),
               _fmt(r.active_size), _fmt(r.t_hat), _fmt(r.sub_iters)]
        row.append(_fmt(r.ms) if include_timings else "")
        w.writerow(row)
    return buf.getvalue()
