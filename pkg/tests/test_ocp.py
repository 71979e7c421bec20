import json

import numpy as np
import pytest

from oracles import dense_lq_solve, double_integrator
from tempo.errors import DimensionError, EvaluationError, NewtonError, ValidationError
from tempo.ocp import (
    BoundaryCondition,
    LqProblemData,
    OcpProblem,
    PrimalDualTrajectory,
    controllability_check,
    discretize_implicit_euler,
    evaluate_kkt_residual,
    load_lq_json,
    make_lq_problem,
    random_lq_data,
    save_lq_json,
)

# dense-oracle solution of the double integrator on 1..6, frozen
FROZEN_X = np.array([
    [1.0, -0.5],
    [0.95, -0.42705996169],
    [0.907294003831, -0.362232186091],
    [0.871070785222, -0.304464081296],
    [0.840624377092, -0.252910171927],
    [0.8153333599, -0.206910171927],
])
FROZEN_U = np.array([0.229400383103, 0.148277755992, 0.077681047943, 0.015539093687, -0.04])
FROZEN_LAM = np.array([
    [7.099311771889, -3.234072653837],
    [5.599311771889, -2.294003831026],
    [4.170135756565, -1.482777559923],
    [2.800440623339, -0.776810479428],
    [1.480084685414, -0.155390936873],
    [0.2, 0.4],
])
FROZEN_BC = BoundaryCondition([1.0, -0.5], [0.2, 0.4])


def test_dense_oracle_frozen_values():
    traj = dense_lq_solve(double_integrator(), 1, 6, FROZEN_BC)
    np.testing.assert_allclose(traj.states, FROZEN_X, atol=1e-11)
    np.testing.assert_allclose(traj.inputs[:, 0], FROZEN_U, atol=1e-11)
    np.testing.assert_allclose(traj.costates, FROZEN_LAM, atol=1e-11)


def test_zero_problem_has_zero_residual():
    data = LqProblemData(np.zeros((2, 2)), np.eye(2), np.zeros(2), np.eye(2), np.eye(2), np.zeros(2))
    prob = make_lq_problem(data, 1, 6)
    res = evaluate_kkt_residual(prob, PrimalDualTrajectory.zeros(prob), BoundaryCondition.zeros(2))
    assert all(v == 0.0 for v in res.as_dict().values())


def test_dense_solution_satisfies_kkt(rng):
    data = random_lq_data(rng, 3)
    prob = make_lq_problem(data, 1, 30)
    bc = BoundaryCondition(rng.standard_normal(3), rng.standard_normal(3))
    traj = dense_lq_solve(data, 1, 30, bc)
    assert evaluate_kkt_residual(prob, traj, bc).max() <= 1e-9


def test_costate_perturbation_shows_in_stationarity(rng):
    data = random_lq_data(rng, 3)
    prob = make_lq_problem(data, 1, 12)
    bc = BoundaryCondition(rng.standard_normal(3), rng.standard_normal(3))
    traj = dense_lq_solve(data, 1, 12, bc)
    base = evaluate_kkt_residual(prob, traj, bc)
    bad = traj.copy()
    bad.costates[5 - 1, 1] += 1.0  # lambda_5
    res = evaluate_kkt_residual(prob, bad, bc)
    # lambda_5 enters the x-row of stage 5 directly and the rows of stage 4 through A', B'
    induced = max(1.0, np.max(np.abs(data.A.T[:, 1])))
    assert res.stationarity_x >= induced - 1e-9
    assert res.primal_feas == base.primal_feas
    assert res.ineq_feas == base.ineq_feas == 0.0


def test_dimension_mismatch_names_stage(rng):
    data = random_lq_data(rng, 2)
    prob = make_lq_problem(data, 3, 10)
    traj = PrimalDualTrajectory.zeros(prob)
    traj.inputs = traj.inputs[:-2]
    with pytest.raises(DimensionError) as exc:
        evaluate_kkt_residual(prob, traj, BoundaryCondition.zeros(2))
    assert exc.value.stage == 3 + 5


def test_nonfinite_evaluator_raises_with_stage():
    def cost(x, u, i):
        v = np.nan if i == 4 else 0.0
        return v, np.zeros(1) + v, np.zeros(1)

    prob = OcpProblem(1, 6, 1, 1, cost, lambda x, u, i: (x + u, np.eye(1), np.eye(1)))
    with pytest.raises(EvaluationError) as exc:
        evaluate_kkt_residual(prob, PrimalDualTrajectory.zeros(prob), BoundaryCondition.zeros(1))
    assert exc.value.stage == 4


def test_lq_stage_cost_substitution():
    data = LqProblemData([[1.0]], [[1.0]], [0.0], [[1.0]], [[1.0]], [0.0])
    prob = make_lq_problem(data, 1, 3)
    assert prob.stage_cost(np.array([2.0]), np.array([3.0]), 1)[0] == 13.0


@pytest.mark.parametrize("Q", [np.diag([1.0, 0.0]), np.diag([1.0, -1.0])])
def test_rejects_singular_or_indefinite_q(Q):
    data = LqProblemData(np.eye(2), np.ones((2, 1)), np.zeros(2), Q, np.eye(1), np.zeros(2))
    with pytest.raises(ValidationError, match="Q"):
        make_lq_problem(data, 1, 4)


def test_lq_gradients_match_finite_differences(rng):
    data = random_lq_data(rng, 4)
    prob = make_lq_problem(data, 1, 5)
    x, u = rng.standard_normal(4), rng.standard_normal(1)
    _, gx, gu = prob.stage_cost(x, u, 1)
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd = (prob.stage_cost(x + e, u, 1)[0] - prob.stage_cost(x - e, u, 1)[0]) / (2 * h)
        assert abs(fd - gx[k]) <= 1e-8 * max(1.0, abs(gx[k]))
    fd = (prob.stage_cost(x, u + h, 1)[0] - prob.stage_cost(x, u - h, 1)[0]) / (2 * h)
    assert abs(fd - gu[0]) <= 1e-8 * max(1.0, abs(gu[0]))


def test_controllability_examples(rng):
    assert controllability_check(np.zeros((2, 2)), [[1.0], [0.0]]) == (False, 1)
    assert controllability_check([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]]) == (True, 2)
    A, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 1))
    C = np.hstack([np.linalg.matrix_power(A, k) @ b for k in range(5)])
    assert controllability_check(A, b)[1] == np.linalg.matrix_rank(C)
    assert controllability_check(A, -3.5 * b) == controllability_check(A, b)


def test_lq_json_roundtrip(tmp_path):
    data = double_integrator()
    path = tmp_path / "lq.json"
    save_lq_json(path, data, 2, 40)
    doc = json.loads(path.read_text())
    assert set(doc) == {"A", "B", "c", "Q", "R", "f_lin", "M", "N"}
    back, M, N = load_lq_json(path)
    assert (M, N) == (2, 40)
    for key in ("A", "B", "c", "Q", "R", "f_lin"):
        np.testing.assert_array_equal(getattr(back, key), getattr(data, key))


def test_lq_json_missing_key(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"A": [[1.0]]}))
    with pytest.raises(ValidationError, match="missing"):
        load_lq_json(path)


# ---------------------------------------------------------------- implicit Euler


def test_stationary_ode_is_identity():
    step = discretize_implicit_euler(lambda x, u: (np.zeros(3), np.zeros((3, 3)), np.zeros((3, 1))), 1.0, 4)
    x = np.array([0.3, -1.0, 2.0])
    y, fx, fu = step(x, np.array([0.7]))
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(fx, np.eye(3))
    np.testing.assert_array_equal(fu, np.zeros((3, 1)))


def _linear_rhs(x, u):
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    b = np.array([0.0, 1.0])
    return A @ x + b * u[0], A, b.reshape(2, 1)


def test_equilibrium_is_fixed_point():
    step = discretize_implicit_euler(_linear_rhs, 1.0, 4)
    u = np.array([0.8])
    xe = np.linalg.solve(np.array([[-1.0, 0.5], [0.0, -2.0]]), -np.array([0.0, 0.8]))
    assert np.max(np.abs(step(xe, u)[0] - xe)) <= 1e-10


def test_jacobians_match_finite_differences(rng):
    step = discretize_implicit_euler(_linear_rhs, 0.7, 3)
    x, u = rng.standard_normal(2), rng.standard_normal(1)
    _, fx, fu = step(x, u)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (step(x + e, u)[0] - step(x - e, u)[0]) / (2 * h)
        np.testing.assert_allclose(fx[:, k], fd, rtol=1e-6, atol=1e-9)
    fd = (step(x, u + h)[0] - step(x, u - h)[0]) / (2 * h)
    np.testing.assert_allclose(fu[:, 0], fd, rtol=1e-6, atol=1e-9)


def test_newton_failure_carries_iterate():
    # x' = -x^3 + 20 x^2 from a far start: ill-conditioned Newton
    rhs = lambda x, u: (np.array([np.exp(x[0]) * 50]), np.array([[np.exp(x[0]) * 50]]), np.zeros((1, 1)))
    step = discretize_implicit_euler(rhs, 1.0, 1, max_iter=3)
    with pytest.raises(NewtonError) as exc:
        step(np.array([5.0]), np.array([0.0]), 7)
    assert exc.value.stage == 7
    assert exc.value.iterate is not None


def test_invalid_discretization_arguments():
    with pytest.raises(ValidationError):
        discretize_implicit_euler(_linear_rhs, 0.0, 4)
    with pytest.raises(ValidationError):
        discretize_implicit_euler(_linear_rhs, 1.0, 0)


def test_boundary_condition_validation():
    with pytest.raises(DimensionError):
        BoundaryCondition([1.0, 2.0], [1.0])
    with pytest.raises(ValidationError):
        BoundaryCondition([np.inf], [0.0])
