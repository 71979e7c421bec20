import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import dense_lq_solve
from tempo.errors import ValidationError
from tempo.ocp import (
    BoundaryCondition,
    LqProblemData,
    OcpProblem,
    evaluate_kkt_residual,
    make_lq_problem,
    random_lq_data,
)
from tempo.subsolver import SolverOptions, solve, solve_dense_nlp, solve_lq, solve_nlp


def test_one_step_closed_form():
    data = LqProblemData([[1.0]], [[1.0]], [0.0], [[1.0]], [[1.0]], [0.0])
    traj, rep = solve_lq(data, 1, 2, BoundaryCondition([1.0], [1.0]))
    assert rep.converged
    assert traj.inputs[0, 0] == pytest.approx(-0.5, abs=1e-14)
    assert traj.states[1, 0] == pytest.approx(0.5, abs=1e-14)
    assert traj.costates[1, 0] == 1.0


def test_zero_data_gives_zero_trajectory(rng):
    d = random_lq_data(rng, 3)
    d = LqProblemData(d.A, d.B, np.zeros(3), d.Q, d.R, np.zeros(3))
    traj, _ = solve_lq(d, 1, 15, BoundaryCondition.zeros(3))
    assert np.all(traj.states == 0) and np.all(traj.inputs == 0) and np.all(traj.costates == 0)


def test_matches_dense_oracle(rng):
    data = random_lq_data(rng, 3)
    bc = BoundaryCondition(rng.standard_normal(3), rng.standard_normal(3))
    traj, _ = solve_lq(data, 5, 45, bc)
    ref = dense_lq_solve(data, 5, 45, bc)
    assert traj.max_abs_diff(ref, with_inputs=True) <= 1e-10


def test_superposition(rng):
    d = random_lq_data(rng, 2, 1)
    d = LqProblemData(d.A, d.B, np.zeros(2), d.Q, d.R, np.zeros(2))
    bc = BoundaryCondition(rng.standard_normal(2), rng.standard_normal(2))
    a, _ = solve_lq(d, 1, 50, bc)
    b, _ = solve_lq(d, 1, 50, BoundaryCondition(2 * bc.x_init, 2 * bc.lambda_terminal))
    np.testing.assert_allclose(b.z, 2 * a.z, atol=1e-9)


def test_report_kkt_within_tolerance(rng):
    data = random_lq_data(rng, 4, 2)
    prob = make_lq_problem(data, 1, 80)
    bc = BoundaryCondition(rng.standard_normal(4), rng.standard_normal(4))
    traj, rep = solve(prob, bc)
    assert rep.converged and rep.final_kkt.max() <= 1e-8
    assert evaluate_kkt_residual(prob, traj, bc).max() <= 1e-8


def test_nlp_reproduces_lq(rng):
    data = random_lq_data(rng, 3)
    prob = make_lq_problem(data, 1, 40)
    bc = BoundaryCondition(rng.standard_normal(3), rng.standard_normal(3))
    a, _ = solve_lq(data, 1, 40, bc)
    b, rep = solve_nlp(prob, bc)
    assert rep.converged
    assert a.max_abs_diff(b, with_inputs=True) <= 1e-8


def _scalar_bounded(bound):
    def cost(x, u, i):
        return float(u[0] ** 2), np.zeros(1), 2 * u

    def ineq(x, u, i):
        return np.array([u[0] - bound]), np.zeros((1, 1)), np.ones((1, 1))

    return OcpProblem(1, 2, 1, 1, cost, lambda x, u, i: (x + u, np.eye(1), np.eye(1)),
                      n_g=1, inequality=ineq, cost_hessian=lambda x, u, i: np.diag([0.0, 2.0]))


def test_inactive_bound_gives_unconstrained_optimum():
    traj, rep = solve_nlp(_scalar_bounded(0.5), BoundaryCondition([0.0], [0.0]))
    assert rep.converged
    assert abs(traj.inputs[0, 0]) <= 1e-8
    assert 0.0 <= traj.ineq_multipliers[0, 0] <= 1e-8


def test_active_bound_multiplier():
    # min u^2 + lam x_2, x_2 = u, u <= -1 with lam = 0 -> u = -1, mu = 2
    traj, rep = solve_nlp(_scalar_bounded(-1.0), BoundaryCondition([0.0], [0.0]))
    assert rep.converged
    assert traj.inputs[0, 0] == pytest.approx(-1.0, abs=1e-7)
    assert traj.ineq_multipliers[0, 0] == pytest.approx(2.0, abs=1e-6)


def test_iteration_budget_is_reported_not_raised(rng):
    traj, rep = solve_nlp(_scalar_bounded(-1.0), BoundaryCondition([0.0], [0.0]),
                          opts=SolverOptions(max_newton_iters=1))
    assert not rep.converged and rep.status == "max_iter"
    assert traj.inputs.shape == (1, 1)


def test_hessian_modes_agree(rng):
    data = random_lq_data(rng, 2)
    prob = make_lq_problem(data, 1, 20)
    bc = BoundaryCondition(rng.standard_normal(2), rng.standard_normal(2))
    ref, _ = solve_lq(data, 1, 20, bc)
    bare = replace(prob, cost_hessian=None, lagrangian_hessian=None)  # finite differences
    for p, mode in ((prob, "exact"), (prob, "gauss_newton"), (bare, "auto")):
        traj, rep = solve_nlp(p, bc, opts=SolverOptions(hessian=mode))
        assert rep.converged
        assert traj.max_abs_diff(ref) <= 1e-7


@pytest.mark.parametrize("kwargs", [
    {"kkt_tol": 0.0}, {"barrier_reduction": 1.0}, {"fraction_to_boundary": 1.5},
    {"max_newton_iters": 0}, {"hessian": "exact-ish"},
])
def test_options_validation(kwargs):
    with pytest.raises(ValidationError):
        SolverOptions(**kwargs)


def test_dense_nlp_small_qp():
    # min (z0 - 1)^2 + (z1 - 2)^2  s.t. z0 + z1 = 1, z0 <= 0.2
    obj = lambda z: (float((z[0] - 1) ** 2 + (z[1] - 2) ** 2), np.array([2 * (z[0] - 1), 2 * (z[1] - 2)]))
    eq = lambda z: (np.array([z[0] + z[1] - 1.0]), np.array([[1.0, 1.0]]))
    ineq = lambda z: (np.array([z[0] - 0.2]), np.array([[1.0, 0.0]]))
    hess = lambda z, y, mu: 2 * np.eye(2)
    res = solve_dense_nlp(obj, eq, ineq, hess, np.zeros(2), SolverOptions(kkt_tol=1e-10))
    assert res.converged
    np.testing.assert_allclose(res.z, [0.0, 1.0], atol=1e-8)


def test_linear_cost_in_horizon(rng):
    data = random_lq_data(rng, 3)
    bc = BoundaryCondition(rng.standard_normal(3), rng.standard_normal(3))

    def best(n):
        solve_lq(data, 1, 1 + n, bc)
        ts = []
        for _ in range(3):
            t0 = time.perf_counter()
            solve_lq(data, 1, 1 + n, bc)
            ts.append(time.perf_counter() - t0)
        return min(ts)

    assert best(8000) <= 3.0 * best(4000)
