"""Observation operators acting on jump/offset pairs, dual functions and loss.

Every model exposes the two blocks of the linear map ``(q, c) -> K B(q, c)``:

* ``atom_response(positions, directions)``: columns ``K B(v delta_t, 0)``;
* ``offset_response()``: columns ``K B(0, e_j)`` (the constant functions).

The dual function for an observation-space vector ``g`` is the running
primitive ``p(t) = int_0^t K^* g``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .bv_core import BvCurve

__all__ = [
    "DualFunction",
    "ForwardModel",
    "GaussianDeconvModel",
    "GridMatrixModel",
    "QuadraticLoss",
    "psi_eval",
    "forward",
    "dual",
    "loss_grad",
    "adjoint_pairing",
    "load_matrix_csv",
    "save_matrix_csv",
]

SQRT2 = np.sqrt(2.0)
SQRT2PI = np.sqrt(2.0 * np.pi)


class DualFunction:
    """Evaluable ``p``, ``p'`` and (optionally) ``p''`` on ``[0, T]``.

    All evaluators map an array of ``n`` times to an ``(n, d)`` array.
    ``breakpoints`` lists the interior points where ``p'`` may jump; for a
    piecewise linear dual the extrema of ``|p|`` lie among them.
    """

    def __init__(
        self,
        value: Callable,
        derivative: Callable,
        second_derivative: Optional[Callable],
        horizon: float,
        dim: int,
        breakpoints=None,
    ):
        self._value = value
        self._derivative = derivative
        self._second = second_derivative
        self.horizon = float(horizon)
        self.dim = int(dim)
        self.breakpoints = None if breakpoints is None else np.asarray(breakpoints, float)

    @property
    def has_second_derivative(self) -> bool:
        return self._second is not None

    def _call(self, fn, t):
        t = np.asarray(t, dtype=float)
        out = np.asarray(fn(np.atleast_1d(t)), dtype=float).reshape(-1, self.dim)
        return out[0] if t.ndim == 0 else out

    def value(self, t):
        return self._call(self._value, t)

    def derivative(self, t):
        return self._call(self._derivative, t)

    def second_derivative(self, t):
        if self._second is None:
            raise NotImplementedError("second derivative unavailable for this dual")
        return self._call(self._second, t)

    __call__ = value

    def norm(self, t):
        return np.linalg.norm(self.value(np.atleast_1d(t)), axis=1)


class ForwardModel:
    """Base class; subclasses provide the atom and offset response blocks."""

    horizon: float
    dim: int

    @property
    def n_obs(self) -> int:
        raise NotImplementedError

    def atom_response(self, positions, directions) -> np.ndarray:
        raise NotImplementedError

    def offset_response(self) -> np.ndarray:
        raise NotImplementedError

    def dual(self, g) -> DualFunction:
        raise NotImplementedError

    def forward(self, curve: BvCurve) -> np.ndarray:
        if curve.dim != self.dim or curve.horizon != self.horizon:
            raise ValueError("curve does not match the model's dimension/horizon")
        y = self.offset_response() @ curve.mean
        if len(curve.active_set):
            y = y + self.atom_response(curve.positions, curve.directions) @ curve.magnitudes
        return y

    def indicator_response(self, positions, directions) -> np.ndarray:
        """Columns ``K(v chi_t)`` for the raw step functions (no mean shift)."""
        positions = np.atleast_1d(np.asarray(positions, float))
        directions = np.asarray(directions, float).reshape(positions.size, self.dim)
        shift = directions * ((self.horizon - positions) / self.horizon)[:, None]
        return self.atom_response(positions, directions) + self.offset_response() @ shift.T

    def measure_norm_bound(self) -> float:
        """Upper bound on ``sup |K B(v delta_t, 0)|`` over ``t`` and unit ``v``."""
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class GaussianDeconvModel(ForwardModel):
    """Samples of the Gaussian-blurred signal at points ``rho_i`` (``d = 1``).

    ``(K u)_i = (1/(sqrt(2 pi) sigma)) int_0^T u(t) exp(-(t - rho_i)^2 / (2 sigma^2)) dt``.
    The kernel mass is not renormalized to ``[0, T]``.
    """

    kernel_width: float
    sample_points: np.ndarray
    horizon: float = 1.0
    dim: int = field(default=1, init=False)

    def __post_init__(self):
        rho = np.asarray(self.sample_points, dtype=float).reshape(-1)
        rho.setflags(write=False)
        object.__setattr__(self, "sample_points", rho)
        if not self.kernel_width > 0:
            raise ValueError("kernel width must be positive")
        if rho.size == 0 or np.any(np.diff(rho) <= 0):
            raise ValueError("sample points must be strictly increasing")
        if rho[0] <= 0 or rho[-1] >= self.horizon:
            raise ValueError("sample points must lie inside (0, T)")

    @classmethod
    def uniform(cls, m: int, kernel_width: float, horizon: float = 1.0):
        return cls(kernel_width, horizon * np.arange(1, m + 1) / (m + 1), horizon)

    @property
    def n_obs(self) -> int:
        return self.sample_points.size

    def psi(self, t):
        """``psi_i(t) = int_0^t k_i`` for all ``i``; shape ``(n, m)``."""
        t = np.atleast_1d(np.asarray(t, float))[:, None]
        rho = self.sample_points[None, :]
        s = SQRT2 * self.kernel_width
        return 0.5 * (erf((t - rho) / s) + erf(rho / s))

    def kernel(self, t):
        """``psi_i'(t) = k_i(t)``; shape ``(n, m)``."""
        t = np.atleast_1d(np.asarray(t, float))[:, None]
        z = (t - self.sample_points[None, :]) / self.kernel_width
        return np.exp(-0.5 * z * z) / (SQRT2PI * self.kernel_width)

    def kernel_derivative(self, t):
        t = np.atleast_1d(np.asarray(t, float))[:, None]
        diff = t - self.sample_points[None, :]
        return -diff / self.kernel_width**2 * self.kernel(t[:, 0])

    def psi_end(self) -> np.ndarray:
        return self.psi(self.horizon)[0]

    def atom_response(self, positions, directions) -> np.ndarray:
        positions = np.atleast_1d(np.asarray(positions, float))
        signs = np.asarray(directions, float).reshape(positions.size)
        cols = -self.psi(positions) + self.psi_end()[None, :] * (positions / self.horizon)[:, None]
        return (cols * signs[:, None]).T

    def offset_response(self) -> np.ndarray:
        return self.psi_end()[:, None].copy()

    def dual(self, g) -> DualFunction:
        g = np.asarray(g, dtype=float).reshape(-1)
        if g.size != self.n_obs:
            raise ValueError(f"gradient has {g.size} entries, model observes {self.n_obs}")
        return DualFunction(
            lambda t: self.psi(t) @ g,
            lambda t: self.kernel(t) @ g,
            lambda t: self.kernel_derivative(t) @ g,
            self.horizon,
            1,
        )

    def measure_norm_bound(self) -> float:
        ts = np.linspace(0.0, self.horizon, 20001)
        cols = self.atom_response(ts, np.ones_like(ts))
        peak = np.linalg.norm(cols, axis=0).max()
        # derivative of each column is bounded by max kernel + psi_i(T)/T
        lip = np.sqrt(self.n_obs) * (1.0 / (SQRT2PI * self.kernel_width) + 1.0 / self.horizon)
        return float(peak + lip * (ts[1] - ts[0]))


@dataclass(frozen=True, eq=False)
class GridMatrixModel(ForwardModel):
    """Matrix acting on cell averages of ``u`` over ``n`` uniform cells.

    ``matrix`` has shape ``(m, n*d)``; column ``j*d + a`` multiplies the
    average of component ``a`` over cell ``j``.
    """

    matrix: np.ndarray
    grid_n: int
    dim: int = 1
    horizon: float = 1.0

    def __post_init__(self):
        A = np.array(self.matrix, dtype=float, ndmin=2)
        A.setflags(write=False)
        object.__setattr__(self, "matrix", A)
        if self.grid_n < 1:
            raise ValueError("grid_n must be >= 1")
        if A.shape[1] != self.grid_n * self.dim:
            raise ValueError(f"matrix must have {self.grid_n * self.dim} columns, got {A.shape[1]}")
        if not np.all(np.isfinite(A)):
            raise ValueError("matrix has non-finite entries")

    @property
    def n_obs(self) -> int:
        return self.matrix.shape[0]

    @property
    def cell_width(self) -> float:
        return self.horizon / self.grid_n

    @property
    def nodes(self) -> np.ndarray:
        return self.horizon * np.arange(self.grid_n + 1) / self.grid_n

    def _blocks(self) -> np.ndarray:
        return self.matrix.reshape(self.n_obs, self.grid_n, self.dim)

    def atom_response(self, positions, directions) -> np.ndarray:
        positions = np.atleast_1d(np.asarray(positions, float))
        dirs = np.asarray(directions, float).reshape(positions.size, self.dim)
        h = self.cell_width
        lo = self.nodes[:-1]
        # average of chi_t over each cell, minus the mean correction
        frac = np.clip((lo[None, :] + h - positions[:, None]) / h, 0.0, 1.0)
        frac -= ((self.horizon - positions) / self.horizon)[:, None]
        # cols[i, k] = sum_{j,a} A[i, j, a] frac[k, j] dirs[k, a]
        return np.einsum("ija,kj,ka->ik", self._blocks(), frac, dirs)

    def offset_response(self) -> np.ndarray:
        return self._blocks().sum(axis=1)

    def adjoint_density(self, g) -> np.ndarray:
        """Cellwise values of ``K^* g`` as an ``(n, d)`` array."""
        g = np.asarray(g, dtype=float).reshape(-1)
        return (self.matrix.T @ g).reshape(self.grid_n, self.dim) / self.cell_width

    def dual(self, g) -> DualFunction:
        g = np.asarray(g, dtype=float).reshape(-1)
        if g.size != self.n_obs:
            raise ValueError(f"gradient has {g.size} entries, model observes {self.n_obs}")
        dens = self.adjoint_density(g)
        h = self.cell_width
        nodes = self.nodes
        prim = np.vstack([np.zeros((1, self.dim)), np.cumsum(dens * h, axis=0)])
        n = self.grid_n

        def cell(t):
            return np.clip(np.floor(t / h).astype(int), 0, n - 1)

        def value(t):
            j = cell(t)
            return prim[j] + dens[j] * (t - nodes[j])[:, None]

        def derivative(t):
            return dens[cell(t)]

        return DualFunction(value, derivative, None, self.horizon, self.dim, breakpoints=nodes[1:-1])

    def measure_norm_bound(self) -> float:
        # |K B(. delta_t, 0)| is the norm of an affine function of t on each
        # cell, so its supremum is attained at a node
        eye = np.eye(self.dim)
        best = 0.0
        for t in self.nodes:
            cols = self.atom_response(np.full(self.dim, t), eye)
            best = max(best, np.linalg.norm(cols, 2))
        return float(best)


@dataclass(frozen=True)
class QuadraticLoss:
    """``F(y) = |y - y_d|^2 / 2``."""

    target: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.target, dtype=float).reshape(-1).copy()
        y.setflags(write=False)
        if not np.all(np.isfinite(y)):
            raise ValueError("target has non-finite entries")
        object.__setattr__(self, "target", y)

    def value(self, y) -> float:
        r = np.asarray(y, float) - self.target
        return 0.5 * float(r @ r)

    def gradient(self, y) -> np.ndarray:
        return np.asarray(y, float) - self.target


def psi_eval(model: GaussianDeconvModel, i: int, t):
    """Return ``(psi_i(t), psi_i'(t), psi_i''(t))`` for the zero-based index ``i``."""
    if not 0 <= i < model.n_obs:
        raise IndexError(f"sample index {i} out of range for {model.n_obs} samples")
    t = np.asarray(t, float)
    rho, sig = model.sample_points[i], model.kernel_width
    val = 0.5 * (erf((t - rho) / (SQRT2 * sig)) + erf(rho / (SQRT2 * sig)))
    d1 = np.exp(-0.5 * ((t - rho) / sig) ** 2) / (SQRT2PI * sig)
    d2 = -(t - rho) / sig**2 * d1
    return val, d1, d2


def forward(model: ForwardModel, curve: BvCurve) -> np.ndarray:
    return model.forward(curve)


def dual(model: ForwardModel, g) -> DualFunction:
    return model.dual(g)


def loss_grad(loss: QuadraticLoss, y):
    y = np.asarray(y, float)
    if y.shape != loss.target.shape:
        raise ValueError(f"observation shape {y.shape} != target shape {loss.target.shape}")
    return loss.value(y), loss.gradient(y)


def adjoint_pairing(model: ForwardModel, curve: BvCurve, g) -> float:
    """Right-hand side of ``(g, K B(q, c)) = <omega', q> + (c, int_0^T K^* g)``.

    With ``p = int_0^. K^* g`` one has ``omega'(t) = -(p(t) - (t/T) p(T))``.
    """
    p = model.dual(g)
    pT = p.value(curve.horizon)
    total = float(curve.mean @ pT)
    if len(curve.active_set):
        pt = p.value(curve.positions)
        omega = -(pt - np.outer(curve.positions / curve.horizon, pT))
        total += float(np.sum(omega * curve.active_set.weights))
    return total


def load_matrix_csv(path) -> tuple[np.ndarray, int, int]:
    """Read ``m,n,d`` from the first row, then ``m`` rows of ``n*d`` values."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    try:
        m, n, d = (int(x) for x in rows[0])
    except ValueError as exc:
        raise ValueError(f"{path}: first row must be the integers m,n,d") from exc
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    if data.shape != (m, n * d):
        raise ValueError(f"{path}: expected {m}x{n * d} entries, found {data.shape}")
    return data, n, d


def save_matrix_csv(path, matrix, n: int, d: int):
    matrix = np.asarray(matrix, float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([matrix.shape[0], n, d])
        for row in matrix:
            w.writerow([repr(float(x)) for x in row])
