"""Seeded problem instances shared by the test modules."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from bvjump.bv_core import BvCurve
from bvjump.cli import build_config, build_problem, packaged_config, read_config_file
from bvjump.forward_models import GridMatrixModel, QuadraticLoss
from bvjump.pdaj import PdajConfig, run


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@lru_cache(maxsize=None)
def packaged_deconv_config(**overrides):
    raw, base = read_config_file(packaged_config("deconv_paper.cfg"))
    over = {k: (str(v), f"test {k}") for k, v in overrides.items()}
    return build_config(raw, over, base)


def deconv_problem(seed=None):
    """The packaged deconvolution problem, optionally with another noise seed."""
    cfg = packaged_deconv_config() if seed is None else packaged_deconv_config(noise_seed=seed)
    return cfg, build_problem(cfg)


def grid_instance(seed: int, n: int = 40, d: int = 2, m: int = 12):
    """Random ``d``-dimensional grid-matrix problem with a 3-jump truth and 5% noise.

    Returns ``(model, loss, beta)`` with ``beta`` a twentieth of the initial
    dual sup norm, so a handful of jumps is active at the optimum.
    """
    rng = philox(seed)
    A = rng.standard_normal((m, n * d)) / np.sqrt(n)
    model = GridMatrixModel(A, n, d)
    pos = np.sort(rng.uniform(0.1, 0.9, 3))
    dirs = rng.standard_normal((3, d))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    truth = BvCurve.from_arrays(pos, dirs, 0.02 * rng.uniform(0.5, 1.5, 3), 0.02 * rng.standard_normal(d), 1.0)
    y = model.forward(truth)
    z = rng.standard_normal(m)
    loss = QuadraticLoss(y + 0.05 * np.linalg.norm(y) * z / np.linalg.norm(z))
    p0 = run(model, loss, PdajConfig(beta=1.0, max_iter=1)).trace[0].p_inf
    return model, loss, 0.05 * p0
