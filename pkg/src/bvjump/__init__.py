"""Active jump method for total-variation regularized inverse problems on BV curves."""

from .bv_core import ActiveSet, BvCurve, JumpAtom, evaluate, l1_distance, strict_distance, tv_seminorm
from .forward_models import GaussianDeconvModel, GridMatrixModel, QuadraticLoss
from .pdaj import PdajConfig, run
from .subproblem import solve_magnitudes

__all__ = [
    "ActiveSet",
    "BvCurve",
    "JumpAtom",
    "evaluate",
    "l1_distance",
    "strict_distance",
    "tv_seminorm",
    "GaussianDeconvModel",
    "GridMatrixModel",
    "QuadraticLoss",
    "PdajConfig",
    "run",
    "solve_magnitudes",
]
__version__ = "0.1.0"
