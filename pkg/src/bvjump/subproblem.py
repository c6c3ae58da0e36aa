"""Magnitude/offset subproblem over a frozen set of jump positions.

    min_{mu >= 0, c}  1/2 |A mu + C c - y_d|^2 + beta * sum(mu)

``A`` holds the responses of the unit jumps and ``C`` those of the constant
functions.  The KKT system is written as a root of Robinson's normal map

    R(z) = grad f(P(z)) + z - P(z),    P(z) = (max(0, z_mu), z_c),

which is solved by a damped semismooth Newton method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .forward_models import ForwardModel, QuadraticLoss

__all__ = [
    "SubproblemInstance",
    "SubproblemSolution",
    "SubproblemFailure",
    "solve_magnitudes",
    "kkt_residual",
    "default_tolerance",
    "projected_gradient",
]

log = logging.getLogger(__name__)

MAX_NEWTON = 200
STALL_WINDOW = 50
MIN_STEP = 2.0**-20
FALLBACK_ITERS = 20_000


class SubproblemFailure(RuntimeError):
    """Raised when neither Newton nor the fallback reaches the tolerance."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True, eq=False)
class SubproblemInstance:
    positions: np.ndarray
    directions: np.ndarray
    model: ForwardModel
    loss: QuadraticLoss
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        pos = np.atleast_1d(np.asarray(self.positions, float)).reshape(-1)
        dirs = np.asarray(self.directions, float).reshape(pos.size, self.model.dim)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "directions", dirs)

    @property
    def n_atoms(self) -> int:
        return self.positions.size

    def matrices(self):
        """Atom response ``A`` (m, N) and offset response ``C`` (m, d)."""
        C = self.model.offset_response()
        if self.n_atoms:
            A = self.model.atom_response(self.positions, self.directions)
        else:
            A = np.zeros((C.shape[0], 0))
        return A, C


@dataclass
class SubproblemSolution:
    magnitudes: np.ndarray
    offset: np.ndarray
    kkt_residual: float
    objective: float
    newton_iterations: int = 0
    fallback_used: bool = False
    residual_history: list = field(default_factory=list)


def default_tolerance(loss: QuadraticLoss) -> float:
    return 1e-14 * (1.0 + float(np.linalg.norm(loss.target)))


class _Quadratic:
    """Objective, gradient and normal map for the stacked variable ``x = (mu, c)``."""

    def __init__(self, A, C, y, beta):
        self.G = np.hstack([A, C])
        self.y = y
        self.n = A.shape[1]
        self.lin = np.concatenate([np.full(self.n, beta), np.zeros(C.shape[1])])
        self.H = self.G.T @ self.G

    def project(self, z):
        x = z.copy()
        x[: self.n] = np.maximum(0.0, x[: self.n])
        return x

    def objective(self, x):
        r = self.G @ x - self.y
        return 0.5 * float(r @ r) + float(self.lin @ x)

    def gradient(self, x):
        return self.G.T @ (self.G @ x - self.y) + self.lin

    def normal_map(self, z):
        x = self.project(z)
        return self.gradient(x) + z - x

    def active_mask(self, z):
        act = np.ones(z.size, dtype=bool)
        act[: self.n] = z[: self.n] > 0.0
        return act

    def newton_direction(self, z, F):
        """Generalized Newton step for the normal map.

        Returns ``(dz, recession)``.  ``recession`` is not ``None`` when the
        reduced system is inconsistent (singular Hessian on the active set);
        it is the null-space direction along which the objective decreases
        at constant fit.
        """
        act = self.active_mask(z)
        dz = np.empty_like(z)
        if not act.any():
            return -F, None
        H_AA = self.H[np.ix_(act, act)]
        dz_a = np.linalg.lstsq(H_AA, -F[act], rcond=1e-14)[0]
        r = H_AA @ dz_a + F[act]
        # backward-error scale, so near-singular but consistent systems pass
        scale = np.linalg.norm(F[act]) + np.linalg.norm(H_AA, 2) * np.linalg.norm(dz_a)
        rec = None
        if np.linalg.norm(r) > 1e-8 * scale:
            rec = np.zeros_like(z)
            rec[act] = -r
        dz[act] = dz_a
        dz[~act] = -F[~act] - self.H[np.ix_(~act, act)] @ dz_a
        return dz, rec

    def recession_step(self, z, direction):
        """Move along ``direction`` until the first positive magnitude hits zero."""
        mu_dir = direction[: self.n]
        block = (mu_dir < 0.0) & (z[: self.n] > 0.0)
        if not block.any():
            return None
        ratios = np.full(self.n, np.inf)
        ratios[block] = z[: self.n][block] / -mu_dir[block]
        i = int(np.argmin(ratios))
        z_new = z + ratios[i] * direction
        z_new[i] = 0.0
        z_new[: self.n][block & (z_new[: self.n] < 0.0)] = 0.0
        return z_new

    def boundary_step(self, z, dz):
        """Move along ``dz`` until the first positive magnitude reaches zero.

        Returns ``None`` when no magnitude blocks before the full step or
        when the objective would increase.
        """
        mu, dmu = z[: self.n], dz[: self.n]
        block = (dmu < 0.0) & (mu > 0.0)
        if not block.any():
            return None
        ratios = np.full(self.n, np.inf)
        ratios[block] = mu[block] / -dmu[block]
        i = int(np.argmin(ratios))
        if ratios[i] >= 1.0:
            return None
        z_new = z + ratios[i] * dz
        z_new[i] = 0.0
        if self.objective(self.project(z_new)) > self.objective(self.project(z)):
            return None
        return z_new

    def lipschitz(self):
        return float(np.linalg.eigvalsh(self.H)[-1]) if self.H.size else 0.0


def projected_gradient(
    A, C, y, beta, x0=None, iterations=FALLBACK_ITERS, tol=0.0, polish=False
):
    """Accelerated projected gradient (FISTA with projection) on the subproblem.

    Returns the best iterate found as a stacked vector ``(mu, c)``.  With
    ``polish`` a short Newton run is attempted every 500 iterations and the
    loop exits as soon as it reaches ``tol``.
    """
    q = _Quadratic(A, C, np.asarray(y, float), beta)
    L = q.lipschitz()
    x = np.zeros(q.G.shape[1]) if x0 is None else q.project(np.asarray(x0, float))
    if L == 0.0:
        return x
    yk, t = x.copy(), 1.0
    best, best_val = x.copy(), q.objective(x)
    for k in range(iterations):
        x_new = q.project(yk - q.gradient(yk) / L)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        yk = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if tol and k % 50 == 0:
            val = q.objective(x)
            if val < best_val:
                best, best_val = x.copy(), val
            if np.max(np.abs(q.normal_map(x))) <= tol:
                return x
        if polish and k % 500 == 499:
            z, res, _, _ = _newton(q, _to_normal_variable(q, x), tol, max_iter=20)
            if res <= tol:
                return q.project(z)
    if q.objective(x) < best_val:
        best = x
    return best


def kkt_residual(instance: SubproblemInstance, candidate) -> float:
    """KKT violation of ``(mu, c)`` measured through the dual function.

    max of ``|p(T)|_inf``, ``|beta - <p, v_i>|`` on atoms with ``mu_i > 0`` and
    ``max(0, <p, v_i> - beta)`` on atoms with ``mu_i = 0``.
    """
    mu, c = candidate
    mu = np.asarray(mu, float).reshape(-1)
    c = np.atleast_1d(np.asarray(c, float))
    A, C = instance.matrices()
    y = C @ c + (A @ mu if mu.size else 0.0)
    p = instance.model.dual(instance.loss.gradient(y))
    res = float(np.max(np.abs(p.value(instance.model.horizon))))
    if instance.n_atoms:
        inner = np.sum(p.value(instance.positions) * instance.directions, axis=1)
        act = mu > 0
        if act.any():
            res = max(res, float(np.max(np.abs(instance.beta - inner[act]))))
        if (~act).any():
            res = max(res, float(np.max(np.maximum(0.0, inner[~act] - instance.beta))))
    return res


def _to_normal_variable(q: _Quadratic, x):
    """Normal-map variable whose projection is ``x`` (inactive slots carry -grad)."""
    z = x.copy()
    g = q.gradient(x)
    z[: q.n] = np.where(x[: q.n] > 0, x[: q.n], np.minimum(-g[: q.n], 0.0))
    return z


def _damped_step(q: _Quadratic, z, F, dz):
    """Full Newton step if it lowers ``|F|^2``; else the step to the first
    blocking bound; else backtracking.  ``None`` when nothing is accepted."""
    merit = float(F @ F)
    F_full = q.normal_map(z + dz)
    if float(F_full @ F_full) < merit:
        return z + dz
    z_b = q.boundary_step(z, dz)
    if z_b is not None:
        return z_b
    step = 0.5
    while step >= MIN_STEP:
        z_try = z + step * dz
        F_try = q.normal_map(z_try)
        if float(F_try @ F_try) < merit:
            return z_try
        step *= 0.5
    return None


def _newton(q: _Quadratic, z, tol, max_iter=MAX_NEWTON):
    F = q.normal_map(z)
    res = float(np.max(np.abs(F))) if F.size else 0.0
    history = [res]
    best_window, since_progress, it = res, 0, 0
    while res > tol and it < max_iter:
        it += 1
        dz, rec = q.newton_direction(z, F)
        z_new = q.recession_step(z, rec) if rec is not None else None
        if z_new is None:
            z_new = _damped_step(q, z, F, dz)
        if z_new is None:
            break
        z = z_new
        F = q.normal_map(z)
        res = float(np.max(np.abs(F)))
        history.append(res)
        if res <= 0.1 * best_window:
            best_window, since_progress = res, 0
        else:
            since_progress += 1
            if since_progress >= STALL_WINDOW:
                break
    return z, res, it, history


def solve_magnitudes(
    instance: SubproblemInstance,
    warm_start: Optional[tuple] = None,
    tol: Optional[float] = None,
) -> SubproblemSolution:
    """Solve the subproblem by damped semismooth Newton on the normal map.

    Parameters
    ----------
    instance : SubproblemInstance
    warm_start : (mu0, c0), optional
        Starting magnitudes and offset.  A shorter ``mu0`` is padded with
        zeros (the slot of a freshly inserted jump).
    tol : float, optional
        Target for the max-norm of the normal map; defaults to
        ``1e-14 (1 + |y_d|)``.

    Returns
    -------
    SubproblemSolution
        Inactive magnitudes are exactly zero.  The objective exceeds that of
        the warm start only by rounding, and only when the KKT target is met.
    """
    if tol is None:
        tol = default_tolerance(instance.loss)
    if not tol > 0:
        raise ValueError("tol must be positive")
    A, C = instance.matrices()
    n, d = A.shape[1], C.shape[1]
    q = _Quadratic(A, C, instance.loss.target, instance.beta)

    z = np.zeros(n + d)
    if warm_start is not None:
        mu0, c0 = warm_start
        mu0 = np.asarray(mu0, float).reshape(-1)
        c0 = np.atleast_1d(np.asarray(c0, float))
        if mu0.size > n or c0.size != d:
            raise ValueError("warm start does not match the instance dimensions")
        z[: mu0.size] = np.maximum(mu0, 0.0)
        z[n:] = c0
    x_start = q.project(z)
    start_val = q.objective(x_start)

    z, res, it, history = _newton(q, z, tol)
    fallback = False
    if res > tol:
        log.debug("newton stopped at residual %.3e after %d steps; running fallback", res, it)
        fallback = True
        x_fb = projected_gradient(
            A, C, instance.loss.target, instance.beta, q.project(z), tol=tol, polish=True
        )
        z_fb = _to_normal_variable(q, x_fb)
        z_fb, res_fb, it_fb, hist_fb = _newton(q, z_fb, tol)
        it += it_fb
        if res_fb < res:
            z, res = z_fb, res_fb
            history.extend(hist_fb)

    x = q.project(z)
    val = q.objective(x)
    kkt = kkt_residual(instance, (x[:n], x[n:]))
    if val > start_val and not kkt <= tol:
        # an unconverged iterate must not lose to the warm start; a converged
        # one can only trail it by rounding and is kept for its stationarity
        x, val = x_start, start_val
        kkt = kkt_residual(instance, (x[:n], x[n:]))
    mu, c = x[:n].copy(), x[n:].copy()
    if min(res, kkt) > tol:
        raise SubproblemFailure(
            f"subproblem not solved: normal-map residual {res:.3e}, KKT {kkt:.3e}, tol {tol:.3e}",
            best=SubproblemSolution(mu, c, kkt, val, it, fallback, history),
        )
    return SubproblemSolution(mu, c, kkt, val, it, fallback, history)
