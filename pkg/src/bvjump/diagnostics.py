"""Optimality and nondegeneracy certificates and convergence-rate fits.

All checks work on the exact dual ``p`` of a curve.  Equalities such as
``|p(t)| = beta`` are tested inside small bands because the dual of a
numerically converged curve only attains ``beta`` up to rounding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bv_core import BvCurve, tv_seminorm
from .forward_models import DualFunction, ForwardModel, QuadraticLoss
from .pdaj import PdajConfig, _newton_polish, find_candidate

__all__ = [
    "OptimalityReport",
    "NondegeneracyReport",
    "Extremum",
    "RateFit",
    "check_first_order",
    "locate_extrema",
    "check_nondegeneracy",
    "cluster_atoms",
    "growth_margin",
    "fit_geometric",
    "fit_rate",
    "envelope_constant",
]

BAND = 1e-6
CLUSTER_RADIUS = 1e-4
FD_STEP = 1e-5
RANK_RTOL = 1e-10
SCAN_POINTS = 20001


@dataclass(frozen=True)
class OptimalityReport:
    p_inf_gap: float
    p_terminal: float
    extremality_gap: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.p_inf_gap, self.p_terminal, self.extremality_gap) <= self.tol

    def to_dict(self) -> dict:
        return {**asdict(self), "pass": self.passed}


@dataclass(frozen=True)
class Extremum:
    position: float
    direction: np.ndarray
    value: float


@dataclass
class NondegeneracyReport:
    extrema: list
    curvatures: list
    curvature_approximate: bool
    theta0: float
    sigma_gap: float
    radius: float
    complementarity: float
    cluster_sizes: list
    orphan_atoms: int
    min_singular_value: float
    max_singular_value: float

    @property
    def rank_ok(self) -> bool:
        return self.min_singular_value > RANK_RTOL * self.max_singular_value

    @property
    def passed(self) -> bool:
        return (
            len(self.extrema) > 0
            and all(c > 0.0 for c in self.curvatures)
            and self.radius > 0.0
            and self.sigma_gap > 0.0
            and self.complementarity > 0.0
            and self.orphan_atoms == 0
            and self.rank_ok
        )

    def to_dict(self) -> dict:
        return {
            "extrema": [
                {"t": e.position, "v": [float(x) for x in e.direction], "abs_p": e.value}
                for e in self.extrema
            ],
            "curvatures": [float(c) for c in self.curvatures],
            "curvature_approximate": self.curvature_approximate,
            "theta0": self.theta0,
            "sigma_gap": self.sigma_gap,
            "radius": self.radius,
            "complementarity": self.complementarity,
            "cluster_sizes": list(self.cluster_sizes),
            "orphan_atoms": self.orphan_atoms,
            "min_singular_value": self.min_singular_value,
            "max_singular_value": self.max_singular_value,
            "rank_ok": self.rank_ok,
            "pass": self.passed,
        }


def _dual_of(curve, model, loss) -> DualFunction:
    return model.dual(loss.gradient(model.forward(curve)))


def _sup_norm(p: DualFunction, beta: float) -> float:
    cfg = PdajConfig(beta=beta)
    try:
        return find_candidate(p, cfg).p_inf
    except ValueError:
        return 0.0


def check_first_order(
    curve: BvCurve,
    model: ForwardModel,
    loss: QuadraticLoss,
    beta: float,
    tol: float = 1e-8,
) -> OptimalityReport:
    """Gaps in the optimality system ``|p|_inf <= beta``, ``p(T) = 0`` and
    ``<p, u'> = beta |u'|_M``."""
    p = _dual_of(curve, model, loss)
    p_inf = _sup_norm(p, beta)
    terminal = float(np.max(np.abs(p.value(model.horizon))))
    if len(curve.active_set):
        pairing = float(np.sum(curve.active_set.weights * p.value(curve.positions)))
    else:
        pairing = 0.0
    return OptimalityReport(
        p_inf_gap=p_inf - beta,
        p_terminal=terminal,
        extremality_gap=abs(pairing - beta * tv_seminorm(curve)),
        tol=tol,
    )


def _abs_derivatives(p: DualFunction, t: np.ndarray):
    """``P = |p|`` with ``P'`` and ``P''`` (``None`` without ``p''``)."""
    v, dv = p.value(t), p.derivative(t)
    P = np.linalg.norm(v, axis=1)
    g1 = np.sum(v * dv, axis=1)
    dP = g1 / P
    if not p.has_second_derivative:
        return P, dP, None
    ddv = p.second_derivative(t)
    ddP = (np.sum(dv * dv, axis=1) + np.sum(v * ddv, axis=1)) / P - g1**2 / P**3
    return P, dP, ddP


def locate_extrema(
    dual: DualFunction,
    beta: float,
    scan_points: int = SCAN_POINTS,
    cluster_radius: Optional[float] = None,
    band: Optional[float] = None,
) -> list:
    """Points where ``|p|`` reaches ``beta`` (within ``band``), with unit directions.

    Local maxima of a uniform scan are polished by Newton's method when
    ``p''`` is available; breakpoints of a piecewise linear dual are added
    to the candidates.  Candidates closer than ``cluster_radius`` are merged
    into the one with the larger ``|p|``.
    """
    if scan_points < 100:
        raise ValueError("scan_points must be at least 100")
    T = dual.horizon
    radius = CLUSTER_RADIUS * T if cluster_radius is None else cluster_radius
    band = BAND * beta if band is None else band
    ts = np.linspace(0.0, T, scan_points)
    nv = dual.norm(ts)
    ext = np.concatenate([[-np.inf], nv, [-np.inf]])
    peak = (ext[1:-1] >= ext[:-2]) & (ext[1:-1] >= ext[2:]) & (nv > 0.0)
    cand = ts[peak]
    if dual.has_second_derivative and cand.size:
        lo, hi = 1e-12 * T, T - 1e-12 * T
        cand = _newton_polish(dual, cand, lo, hi)
    if dual.breakpoints is not None:
        cand = np.concatenate([cand, dual.breakpoints])
    if cand.size == 0:
        return []
    vals = dual.norm(cand)
    keep = vals >= beta - band
    cand, vals = cand[keep], vals[keep]
    out: list[Extremum] = []
    for i in np.lexsort((cand, -vals)):
        t = float(cand[i])
        if any(abs(t - e.position) <= radius for e in out):
            continue
        p = dual.value(t)
        out.append(Extremum(t, p / np.linalg.norm(p), float(vals[i])))
    return sorted(out, key=lambda e: e.position)


def cluster_atoms(curve: BvCurve, extrema: Sequence[Extremum], radius: float):
    """Assign atoms to the radius-neighborhoods of the extrema.

    Returns per-extremum summed magnitudes, per-extremum atom counts and the
    number of atoms that fall in no neighborhood.
    """
    sums = np.zeros(len(extrema))
    counts = np.zeros(len(extrema), dtype=int)
    orphans = 0
    centres = np.array([e.position for e in extrema])
    for t, mu in zip(curve.positions, curve.magnitudes):
        if centres.size:
            i = int(np.argmin(np.abs(centres - t)))
            if abs(centres[i] - t) < radius:
                sums[i] += mu
                counts[i] += 1
                continue
        orphans += 1
    return sums, counts, orphans


def _isolation(dual: DualFunction, extrema, beta: float, scan_points: int):
    """Largest radius on which ``|p|`` decreases away from every extremum
    (capped by half the spacing and the distance to the ends), and the gap
    ``beta - max |p|`` outside the union of the neighborhoods."""
    T = dual.horizon
    ts = np.linspace(0.0, T, scan_points)
    nv = dual.norm(ts)
    centres = np.array([e.position for e in extrema])
    radius = np.inf
    for e in extrema:
        c = e.position
        for away in (ts[ts > c], ts[ts < c][::-1]):
            tt = np.concatenate([[c], away])
            vv = dual.norm(tt)
            rise = np.flatnonzero(np.diff(vv) > 0.0)
            reach = abs(tt[rise[0]] - c) if rise.size else abs(tt[-1] - c)
            radius = min(radius, reach)
        radius = min(radius, c, T - c)
    if centres.size > 1:
        radius = min(radius, 0.5 * float(np.min(np.diff(centres))))
    radius = max(float(radius), 0.0)
    outside = np.all(np.abs(ts[:, None] - centres[None, :]) >= radius, axis=1)
    sigma = beta - float(nv[outside].max()) if outside.any() else beta
    return radius, sigma


def check_nondegeneracy(
    curve: BvCurve,
    model: ForwardModel,
    loss: QuadraticLoss,
    beta: float,
    scan_points: int = SCAN_POINTS,
    cluster_radius: Optional[float] = None,
) -> NondegeneracyReport:
    """Structural certificate for the dual of a converged curve.

    Curvature ``|P''|`` of ``P = |p|`` is analytic when the model supplies
    ``p''`` and otherwise a central difference of ``P'`` at step ``1e-5 T``.
    """
    p = _dual_of(curve, model, loss)
    T = model.horizon
    extrema = locate_extrema(p, beta, scan_points, cluster_radius)
    pos = np.array([e.position for e in extrema])
    if extrema:
        _, _, ddP = _abs_derivatives(p, pos)
        approximate = ddP is None
        if approximate:
            h = FD_STEP * T
            up = np.minimum(pos + h, T)
            dn = np.maximum(pos - h, 0.0)
            ddP = (_abs_derivatives(p, up)[1] - _abs_derivatives(p, dn)[1]) / (up - dn)
        curv = [float(abs(c)) for c in ddP]
        radius, sigma = _isolation(p, extrema, beta, scan_points)
    else:
        approximate, curv, radius, sigma = not p.has_second_derivative, [], 0.0, 0.0
    theta0 = 0.25 * min(curv) if curv else 0.0
    sums, counts, orphans = cluster_atoms(curve, extrema, radius if radius > 0 else np.inf)

    cols = [model.offset_response()]
    if extrema:
        dirs = np.array([e.direction for e in extrema])
        cols.insert(0, model.indicator_response(pos, dirs))
    sv = np.linalg.svd(np.hstack(cols), compute_uv=False)
    return NondegeneracyReport(
        extrema=extrema,
        curvatures=curv,
        curvature_approximate=approximate,
        theta0=theta0,
        sigma_gap=sigma,
        radius=radius,
        complementarity=float(sums.min()) if sums.size else 0.0,
        cluster_sizes=[int(c) for c in counts],
        orphan_atoms=orphans,
        min_singular_value=float(sv.min()),
        max_singular_value=float(sv.max()),
    )


def growth_margin(
    report: NondegeneracyReport, dual: DualFunction, beta: float, samples: int = 201
) -> float:
    """Smallest value of ``beta - |p(t)| - theta0 (t - t_i)^2 / 2`` over
    ``|t - t_i| <= R/2``; nonnegative when the quadratic growth bound holds.

    The peak excess ``max(0, |p(t_i)| - beta)`` is credited so that a dual
    overshooting ``beta`` by rounding is not counted against the bound.
    """
    worst = np.inf
    for e in report.extrema:
        dt = np.linspace(-0.5 * report.radius, 0.5 * report.radius, samples)
        t = np.clip(e.position + dt, 0.0, dual.horizon)
        vals = dual.norm(t)
        # centre value from the same evaluation, so the centre term is exactly zero
        peak = vals[np.argmin(np.abs(dt))]
        gap = (max(beta, peak) - peak) + (peak - vals) - 0.5 * report.theta0 * (t - e.position) ** 2
        worst = min(worst, float(gap.min()))
    return worst


@dataclass(frozen=True)
class RateFit:
    zeta: float
    envelope_pass: Optional[bool]
    converged_immediately: bool = False
    n_points: int = 0
    envelope_violations: list = field(default_factory=list)


def fit_geometric(values, tail_fraction: float = 2.0 / 3.0, floor: float = 0.0) -> tuple:
    """``exp`` of the least-squares slope of ``log values`` over the tail.

    Only entries above ``floor`` are used.  Returns ``(zeta, n_points)``;
    ``zeta`` is NaN when fewer than two points remain.
    """
    v = np.asarray(values, float)
    k = np.arange(1, v.size + 1)
    start = int(np.floor(v.size * (1.0 - tail_fraction)))
    k, v = k[start:], v[start:]
    ok = v > floor
    if ok.sum() < 2:
        return float("nan"), int(ok.sum())
    slope = np.polyfit(k[ok], np.log(v[ok]), 1)[0]
    return float(np.exp(slope)), int(ok.sum())


def envelope_constant(r1hat: float, norm_bound: float, m0: float) -> float:
    """``q = min(1, r1hat / (4 |K|^2 M0^2)) / 2`` of the sublinear bound."""
    return 0.5 * min(1.0, r1hat / (4.0 * norm_bound**2 * m0**2))


def fit_rate(
    trace,
    j_star: float,
    tail_fraction: float = 2.0 / 3.0,
    norm_bound: Optional[float] = None,
    m0: Optional[float] = None,
) -> RateFit:
    """Fit a linear rate to ``r_k = j_k - j_star`` and test the sublinear envelope.

    The envelope ``r_k <= rhat_1 / (1 + q (k - 1))`` is only evaluated when
    ``norm_bound`` and ``m0`` are given (``q`` depends on both).  Residuals
    within a few ulps of ``j_star`` are treated as zero for the fit.
    """
    if len(trace) < 5:
        raise ValueError("trace must contain at least 5 iterations")
    j = np.array([r.j for r in trace])
    jhat = np.array([r.jhat for r in trace])
    if j_star > j.min() + 1e-15:
        raise ValueError("j_star exceeds the smallest traced objective")
    r = j - j_star
    floor = 64.0 * np.finfo(float).eps * abs(j_star)
    if np.all(r <= 1e-15):
        return RateFit(float("nan"), None, converged_immediately=True)
    zeta, npts = fit_geometric(r, tail_fraction, floor)
    env, bad = None, []
    if norm_bound is not None and m0 is not None:
        r1hat = jhat[0] - j_star
        q = envelope_constant(r1hat, norm_bound, m0)
        bound = r1hat / (1.0 + q * np.arange(r.size))
        bad = [int(k) for k in np.flatnonzero(r > bound) + 1]
        env = not bad
    return RateFit(zeta, env, False, npts, bad)
