"""Piecewise-constant BV curves represented by weighted jump atoms.

A curve on ``(0, T)`` with values in ``R^d`` is stored through its
derivative measure ``sum_i mu_i v_i delta_{t_i}`` and the vector of component
means.  Reconstruction follows

    u(t) = C + sum_{t_i <= t} mu_i v_i,
    C    = mean - (1/T) sum_i mu_i v_i (T - t_i),

with the value at a breakpoint taken from the right.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "JumpAtom",
    "ActiveSet",
    "BvCurve",
    "StrictMetricValue",
    "evaluate",
    "tv_seminorm",
    "l1_distance",
    "strict_distance",
    "curve_to_dict",
    "curve_from_dict",
]

UNIT_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class JumpAtom:
    """A single jump ``magnitude * direction * delta_position``."""

    position: float
    direction: tuple
    magnitude: float

    def __post_init__(self):
        object.__setattr__(self, "position", float(self.position))
        object.__setattr__(
            self, "direction", tuple(float(x) for x in np.atleast_1d(self.direction))
        )
        object.__setattr__(self, "magnitude", float(self.magnitude))
        if abs(np.linalg.norm(self.direction) - 1.0) > UNIT_TOL:
            raise ValueError("jump direction must have unit Euclidean norm")
        if not self.magnitude >= 0.0:
            raise ValueError("jump magnitude must be nonnegative")


class ActiveSet:
    """Immutable, canonically ordered collection of jump atoms.

    Atoms are sorted by position; ties are broken lexicographically by
    direction.  Coincident positions are kept as separate atoms.
    """

    __slots__ = ("positions", "directions", "magnitudes")

    def __init__(self, positions, directions, magnitudes, dim: int | None = None):
        positions = np.asarray(positions, dtype=float).reshape(-1)
        n = positions.size
        if dim is None:
            directions = np.asarray(directions, dtype=float)
            if directions.size == 0:
                raise ValueError("dimension required for an empty active set")
            directions = directions.reshape(n, -1)
        else:
            directions = np.asarray(directions, dtype=float).reshape(n, dim)
        magnitudes = np.asarray(magnitudes, dtype=float).reshape(-1)
        if magnitudes.size != n:
            raise ValueError("positions and magnitudes differ in length")
        if n and np.any(np.abs(np.linalg.norm(directions, axis=1) - 1.0) > UNIT_TOL):
            raise ValueError("jump directions must have unit Euclidean norm")
        if n and not np.all(magnitudes >= 0.0):
            raise ValueError("jump magnitudes must be nonnegative")
        # np.lexsort: last key is primary
        keys = [directions[:, j] for j in range(directions.shape[1] - 1, -1, -1)]
        order = np.lexsort(keys + [positions]) if n else np.arange(0)
        object.__setattr__(self, "positions", _frozen(positions[order]))
        object.__setattr__(self, "directions", _frozen(directions[order]))
        object.__setattr__(self, "magnitudes", _frozen(magnitudes[order]))

    def __setattr__(self, name, value):
        raise AttributeError("ActiveSet is immutable")

    @classmethod
    def empty(cls, dim: int) -> "ActiveSet":
        return cls(np.zeros(0), np.zeros((0, dim)), np.zeros(0), dim=dim)

    @classmethod
    def from_atoms(cls, atoms: Iterable[JumpAtom], dim: int) -> "ActiveSet":
        atoms = list(atoms)
        if not atoms:
            return cls.empty(dim)
        return cls(
            [a.position for a in atoms],
            [a.direction for a in atoms],
            [a.magnitude for a in atoms],
            dim=dim,
        )

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def atoms(self) -> list[JumpAtom]:
        return [
            JumpAtom(t, v, m)
            for t, v, m in zip(self.positions, self.directions, self.magnitudes)
        ]

    @property
    def weights(self) -> np.ndarray:
        """Jump vectors ``mu_i v_i`` as an ``(N, d)`` array."""
        return self.magnitudes[:, None] * self.directions

    def __len__(self) -> int:
        return self.positions.size

    def __repr__(self) -> str:
        return f"ActiveSet(N={len(self)}, d={self.dim})"


@dataclass(frozen=True)
class BvCurve:
    """Piecewise-constant curve ``u = B(sum mu_i v_i, mean)`` on ``(0, T)``."""

    active_set: ActiveSet
    mean: np.ndarray
    horizon: float

    def __post_init__(self):
        mean = _frozen(np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "horizon", float(self.horizon))
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if mean.shape != (self.active_set.dim,):
            raise ValueError("mean and jump directions differ in dimension")
        pos = self.active_set.positions
        if pos.size and (pos.min() <= 0.0 or pos.max() >= self.horizon):
            raise ValueError("jump positions must lie in the open interval (0, T)")

    @classmethod
    def constant(cls, value, horizon: float) -> "BvCurve":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(ActiveSet.empty(value.size), value, horizon)

    @classmethod
    def from_arrays(cls, positions, directions, magnitudes, mean, horizon) -> "BvCurve":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(ActiveSet(positions, directions, magnitudes, dim=mean.size), mean, horizon)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def positions(self) -> np.ndarray:
        return self.active_set.positions

    @property
    def directions(self) -> np.ndarray:
        return self.active_set.directions

    @property
    def magnitudes(self) -> np.ndarray:
        return self.active_set.magnitudes

    @property
    def offset_constant(self) -> np.ndarray:
        """Value ``C`` of the curve on ``(0, t_1)``."""
        w = self.active_set.weights
        return self.mean - (w * (self.horizon - self.positions)[:, None]).sum(axis=0) / self.horizon

    def breakpoints(self) -> np.ndarray:
        return np.unique(self.positions)

    def __call__(self, t):
        return evaluate(self, t)


@dataclass(frozen=True)
class StrictMetricValue:
    l1_part: float
    tv_gap_part: float

    @property
    def total(self) -> float:
        return self.l1_part + self.tv_gap_part


def evaluate(curve: BvCurve, t):
    """Evaluate a curve at time(s) ``t`` in ``[0, T]``.

    Returns an array of shape ``(d,)`` for scalar ``t`` and ``(n, d)`` for an
    array of ``n`` times.
    """
    t_arr = np.asarray(t, dtype=float)
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    if np.any(t_arr < 0.0) or np.any(t_arr > curve.horizon) or np.any(np.isnan(t_arr)):
        raise ValueError("evaluation time outside [0, T]")
    w = curve.active_set.weights
    cum = np.vstack([np.zeros((1, curve.dim)), np.cumsum(w, axis=0)])
    idx = np.searchsorted(curve.positions, t_arr, side="right")
    out = curve.offset_constant + cum[idx]
    return out[0] if scalar else out


def tv_seminorm(curve: BvCurve) -> float:
    """Total variation ``|u'|_M``; coincident jumps combine vectorially."""
    if len(curve.active_set) == 0:
        return 0.0
    pos = curve.positions
    w = curve.active_set.weights
    uniq, inv = np.unique(pos, return_inverse=True)
    if uniq.size == pos.size:
        return float(np.linalg.norm(w, axis=1).sum())
    grouped = np.zeros((uniq.size, curve.dim))
    np.add.at(grouped, inv, w)
    return float(np.linalg.norm(grouped, axis=1).sum())


def _check_compatible(a: BvCurve, b: BvCurve):
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.horizon != b.horizon:
        raise ValueError(f"horizon mismatch: {a.horizon} vs {b.horizon}")


def l1_distance(a: BvCurve, b: BvCurve) -> float:
    """Exact ``||a - b||_{L^1}`` over the joint partition of both curves."""
    _check_compatible(a, b)
    T = a.horizon
    nodes = np.unique(np.concatenate([[0.0, T], a.positions, b.positions]))
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    diff = evaluate(a, mids) - evaluate(b, mids)
    return float(np.dot(np.linalg.norm(diff, axis=1), np.diff(nodes)))


def strict_distance(a: BvCurve, b: BvCurve) -> StrictMetricValue:
    return StrictMetricValue(l1_distance(a, b), abs(tv_seminorm(a) - tv_seminorm(b)))


def curve_to_dict(curve: BvCurve) -> dict:
    """Serializable form ``{T, d, mean, atoms: [{t, dir, mu}]}``."""
    return {
        "T": curve.horizon,
        "d": curve.dim,
        "mean": [float(x) for x in curve.mean],
        "atoms": [
            {"t": float(t), "dir": [float(x) for x in v], "mu": float(m)}
            for t, v, m in zip(curve.positions, curve.directions, curve.magnitudes)
        ],
    }


def curve_from_dict(data: dict) -> BvCurve:
    d = int(data["d"])
    atoms: Sequence[dict] = data.get("atoms", [])
    if atoms:
        aset = ActiveSet(
            [a["t"] for a in atoms], [a["dir"] for a in atoms], [a["mu"] for a in atoms], dim=d
        )
    else:
        aset = ActiveSet.empty(d)
    return BvCurve(aset, data["mean"], data["T"])
