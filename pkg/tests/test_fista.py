import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bvjump.bv_core import BvCurve
from bvjump.fista import (
    FistaState,
    discretize,
    grid_curve,
    grid_objective,
    power_iteration,
    prox_group,
    run_fista,
)
from bvjump.forward_models import GridMatrixModel, QuadraticLoss
from bvjump.pdaj import run

from oracles import group_lasso_enumeration


@pytest.fixture(scope="module")
def vector_model():
    rng = np.random.default_rng(8)
    return GridMatrixModel(rng.standard_normal((6, 20 * 2)), 20, 2, 2.0)


def test_two_cells_give_one_node(packaged):
    cfg, problem = packaged
    g = discretize(problem.model, problem.loss, cfg.beta, 2)
    assert g.n_nodes == 1 and g.nodes[0] == 0.5
    assert g.response.shape == (9, 1 + 1)
    assert g.h == 0.5


def test_nodes_scale_with_horizon(vector_model):
    g = discretize(vector_model, QuadraticLoss(np.zeros(6)), 0.1, 8)
    assert np.allclose(g.nodes, 2.0 * np.arange(1, 8) / 8)
    assert g.h == pytest.approx(0.25)
    assert g.response.shape == (6, 7 * 2 + 2)


def test_columns_are_forward_of_unit_atoms(vector_model):
    g = discretize(vector_model, QuadraticLoss(np.zeros(6)), 0.1, 5)
    for i, t in enumerate(g.nodes):
        for j in range(2):
            e = np.eye(2)[j]
            col = vector_model.forward(BvCurve.from_arrays([t], e[None, :], [1.0], [0.0, 0.0], 2.0))
            assert np.allclose(g.response[:, 2 * i + j], col, atol=1e-14)
    for j in range(2):
        col = vector_model.forward(BvCurve.constant(np.eye(2)[j], 2.0))
        assert np.allclose(g.response[:, -2 + j], col, atol=1e-14)


def test_lipschitz_against_dense_eigensolver(packaged):
    cfg, problem = packaged
    g = discretize(problem.model, problem.loss, cfg.beta, 11)
    dense = np.linalg.eigvalsh(g.response.T @ g.response)[-1]
    assert g.lipschitz == pytest.approx(dense, rel=1e-9)


def test_power_iteration_edge_cases():
    assert power_iteration(np.zeros((0, 0))) == 0.0
    assert power_iteration(np.zeros((3, 3))) == 0.0
    assert power_iteration(np.diag([1.0, 5.0, 2.0])) == pytest.approx(5.0, rel=1e-10)


def test_discretize_needs_two_cells(packaged):
    cfg, problem = packaged
    with pytest.raises(ValueError):
        discretize(problem.model, problem.loss, cfg.beta, 1)


def test_prox_examples():
    assert np.array_equal(prox_group(np.zeros(5), 1.0, 2, 2), np.zeros(5))
    z = np.array([0.3, 0.4, 3.0, 4.0, 7.0])
    out = prox_group(z, 1.0, 2, 2)
    assert np.array_equal(out[:2], [0.0, 0.0])
    assert np.allclose(out[2:4], [2.4, 3.2], rtol=1e-15)
    assert out[4] == 7.0
    with pytest.raises(ValueError):
        prox_group(z, -1.0, 2, 2)


vectors = arrays(np.float64, 7, elements=st.floats(-10, 10))


@settings(max_examples=200)
@given(vectors, vectors, st.floats(0, 5))
def test_prox_is_nonexpansive(a, b, tau):
    pa, pb = prox_group(a, tau, 3, 2), prox_group(b, tau, 3, 2)
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12


def test_zero_target_stays_at_zero(packaged):
    cfg, problem = packaged
    g = discretize(problem.model, QuadraticLoss(np.zeros(9)), cfg.beta, 10)
    res = run_fista(g, 50)
    assert np.array_equal(res.state.x, np.zeros(g.response.shape[1]))
    assert all(r.j == 0.0 for r in res.trace)


def test_one_over_k_squared_envelope():
    # one node plus offset: two variables, strongly convex
    model = GridMatrixModel(np.array([[1.0, 0.2], [0.3, 1.0], [0.5, -0.4]]), 2, 1)
    loss = QuadraticLoss(np.array([1.0, -0.5, 2.0]))
    g = discretize(model, loss, 0.3, 2)
    x_star, j_star = group_lasso_enumeration(g.response, g.target, g.beta, 1, g.n_nodes)
    res = run_fista(g, 300)
    j = np.array([r.j for r in res.trace])
    k = np.array([r.k for r in res.trace])
    # record k holds iterate k - 1, whose bound is 2 L |x0 - x*|^2 / k^2 (x0 = 0)
    bound = 2.0 * g.lipschitz * float(x_star @ x_star) / k[1:] ** 2
    assert np.all(j[1:] - j_star <= bound + 1e-15)
    assert j[-1] - j_star <= 1e-12


@pytest.mark.slow
def test_grid_pdaj_and_fista_agree(packaged):
    cfg, problem = packaged
    g = discretize(problem.model, problem.loss, cfg.beta, 10)
    _, j_enum = group_lasso_enumeration(g.response, g.target, g.beta, 1, g.n_nodes)
    pd = run(problem.model, problem.loss, cfg.pdaj_config(search_mode="grid", grid_nodes=tuple(g.nodes)))
    fi = run_fista(g, 10**6, record_every=10**6)
    j_pd, j_fi = pd.trace[-1].j, grid_objective(g, fi.state.x)
    assert j_pd == pytest.approx(j_fi, rel=1e-9)
    assert j_fi == pytest.approx(j_enum, rel=1e-9)
    # the grid run's atoms sit on grid nodes
    assert set(pd.solution.positions) <= set(g.nodes)
    # fixed point of the forward-backward map
    x = fi.state.x
    tau = 1.0 / g.lipschitz
    grad = g.response.T @ (g.response @ x - g.target)
    x_next = prox_group(x - tau * grad, tau * g.beta, 1, g.n_nodes)
    assert np.max(np.abs(x_next - x)) <= 1e-10 * max(1.0, np.max(np.abs(x)))


def test_grid_curve_matches_objective(vector_model):
    rng = np.random.default_rng(0)
    loss = QuadraticLoss(rng.standard_normal(6))
    g = discretize(vector_model, loss, 0.2, 6)
    x = rng.standard_normal(g.response.shape[1])
    x[:2] = 0.0
    curve = grid_curve(g, x)
    assert len(curve.active_set) == g.n_nodes - 1
    j = loss.value(vector_model.forward(curve)) + 0.2 * curve.magnitudes.sum()
    assert j == pytest.approx(grid_objective(g, x), rel=1e-12)


def test_trace_schema(packaged):
    cfg, problem = packaged
    g = discretize(problem.model, problem.loss, cfg.beta, 10)
    res = run_fista(g, 20, record_every=5)
    assert [r.k for r in res.trace] == [1, 6, 11, 16, 21]
    assert all(r.j == r.jhat for r in res.trace)
    with pytest.raises(ValueError):
        run_fista(g, 0)
    with pytest.raises(ValueError):
        run_fista(g, 5, record_every=0)


def test_state_needs_positive_step():
    with pytest.raises(ValueError):
        FistaState(np.zeros(2), np.zeros(2), 0, 1.0, 0.0)
