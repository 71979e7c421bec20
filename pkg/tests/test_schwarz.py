import csv

import numpy as np
import pytest

from oracles import dense_lq_solve
from tempo.errors import SubproblemError, TempoError, ValidationError
from tempo.ocp import BoundaryCondition, PrimalDualTrajectory, make_lq_problem, random_lq_data
from tempo.schwarz import (
    BoundaryData,
    IterationLog,
    SchwarzConfig,
    compute_residuals,
    observed_contraction,
    partition,
    schwarz_solve,
)
from tempo.subsolver import SolverOptions, solve_lq


@pytest.fixture
def lq_case(rng):
    data = random_lq_data(rng, 2, spectral_radius=0.9)
    bc = BoundaryCondition(rng.standard_normal(2), rng.standard_normal(2))
    prob = make_lq_problem(data, 1, 201)
    ref = dense_lq_solve(data, 1, 201, bc)
    return data, prob, bc, ref


def test_partition_example():
    part = partition(1, 12, 3, 1)
    assert part.nonoverlap == ((1, 4), (5, 8), (9, 12))
    assert part.overlap == ((1, 5), (4, 9), (8, 12))


def test_partition_uneven_longer_first():
    part = partition(0, 9, 3, 0)
    assert [b - a + 1 for a, b in part.nonoverlap] == [4, 3, 3]
    assert part.overlap == part.nonoverlap


def test_partition_maximal_overlap():
    part = partition(3, 40, 5, 37)
    assert all(w == (3, 40) for w in part.overlap)


@pytest.mark.parametrize("args", [(1, 5, 0, 1), (1, 5, 6, 1), (1, 5, 2, -1)])
def test_partition_rejects(args):
    with pytest.raises(ValidationError):
        partition(*args)


def test_zero_guess_converges_to_monolithic(lq_case):
    _, prob, bc, ref = lq_case
    traj, log, conv = schwarz_solve(prob, bc, partition(1, 201, 4, 10), SchwarzConfig(), None)
    assert conv and log.status == "converged"
    assert traj.max_abs_diff(ref, with_inputs=True) <= 1e-6


def test_fixed_point(lq_case):
    _, prob, bc, ref = lq_case
    traj, log, conv = schwarz_solve(prob, bc, partition(1, 201, 4, 3), SchwarzConfig(), ref)
    assert conv and len(log) == 1
    assert log.r[0] <= 1e-9 and log.s[0] <= 1e-9
    assert traj.max_abs_diff(ref, with_inputs=True) <= 1e-9


def test_maximal_overlap_one_iteration(lq_case):
    _, prob, bc, ref = lq_case
    traj, log, conv = schwarz_solve(prob, bc, partition(1, 201, 4, 200), SchwarzConfig(), None)
    assert conv and len(log) == 1
    assert traj.max_abs_diff(ref, with_inputs=True) <= 1e-8


def test_endpoints_pinned(lq_case):
    _, prob, bc, _ = lq_case
    guess = PrimalDualTrajectory.zeros(prob)
    guess.states[:] = 5.0
    traj, _, _ = schwarz_solve(prob, bc, partition(1, 201, 4, 4),
                               SchwarzConfig(max_outer_iters=2), guess)
    np.testing.assert_array_equal(traj.states[0], bc.x_init)
    np.testing.assert_array_equal(traj.costates[-1], bc.lambda_terminal)


def test_residuals_match_independent_subdomain_solves(lq_case):
    data, prob, bc, _ = lq_case
    part = partition(1, 201, 4, 5)
    _, log, _ = schwarz_solve(prob, bc, part, SchwarzConfig(max_outer_iters=1), None)
    zero = PrimalDualTrajectory.zeros(prob).pinned(bc)
    sols = []
    for a, b in part.overlap:
        sub_bc = BoundaryCondition(zero.states[a - 1], zero.costates[b - 1])
        sols.append(dense_lq_solve(data, a, b, sub_bc))
    r = s = 0.0
    for k in range(part.K - 1):
        nxt = part.nonoverlap[k][1] + 1
        a_own = part.overlap[k][0]
        a_next = part.overlap[k + 1][0]
        r = max(r, np.max(np.abs(sols[k].states[nxt - a_own] - sols[k + 1].states[nxt - a_next])))
        s = max(s, np.max(np.abs(sols[k].costates[nxt - a_own] - sols[k + 1].costates[nxt - a_next])))
    assert log.r[0] == pytest.approx(r, rel=1e-8, abs=1e-12)
    assert log.s[0] == pytest.approx(s, rel=1e-8, abs=1e-12)


def test_compute_residuals_rows(lq_case):
    data, prob, bc, ref = lq_case
    bd = [BoundaryData(51, ref.states[50] + 0.1, ref.costates[50] - 0.2), None]
    r, s, rows = compute_residuals(ref, bd, prob)
    assert r == pytest.approx(0.1) and s == pytest.approx(0.2)
    fx_row, fu_row, dx = rows[0]
    np.testing.assert_allclose(fx_row, data.A.T @ np.full(2, 0.2))
    np.testing.assert_allclose(fu_row, data.B.T @ np.full(2, 0.2))
    np.testing.assert_allclose(dx, np.full(2, -0.1))


def test_compute_residuals_single_block_and_missing(lq_case):
    _, _, _, ref = lq_case
    assert compute_residuals(ref, [None])[:2] == (0.0, 0.0)
    with pytest.raises(TempoError, match="missing"):
        compute_residuals(ref, [None, None])


def test_zero_overlap_warns_and_reports_nan(lq_case):
    _, prob, bc, _ = lq_case
    with pytest.warns(UserWarning, match="omega = 0"):
        _, log, conv = schwarz_solve(prob, bc, partition(1, 201, 4, 0),
                                     SchwarzConfig(max_outer_iters=3), None)
    assert not conv and np.all(np.isnan(log.r))


def test_single_subdomain_trivial(lq_case):
    _, prob, bc, ref = lq_case
    traj, log, conv = schwarz_solve(prob, bc, partition(1, 201, 1, 0), SchwarzConfig(), None)
    assert conv and log.r[0] == 0.0 and traj.max_abs_diff(ref) <= 1e-9


def test_contraction_arithmetic():
    rates, mean = observed_contraction([1.0, 0.1, 0.01])
    np.testing.assert_allclose(rates, [0.1, 0.1])
    assert mean == pytest.approx(0.1)
    with pytest.raises(ValidationError):
        observed_contraction([1.0])


def test_rate_improves_with_overlap(lq_case):
    _, prob, bc, ref = lq_case
    cfg = SchwarzConfig(eps_primal=1e-10, eps_dual=1e-10, record_error_vs_reference=ref)
    m = {}
    for w in (2, 8):
        _, log, conv = schwarz_solve(prob, bc, partition(1, 201, 4, w), cfg, None)
        assert conv
        m[w] = observed_contraction(log)[1]
    assert m[8] < m[2]


def test_maximal_overlap_single_rate_near_zero(lq_case):
    _, prob, bc, ref = lq_case
    cfg = SchwarzConfig(record_error_vs_reference=ref)
    _, log, _ = schwarz_solve(prob, bc, partition(1, 201, 4, 200), cfg, None)
    rates, _ = observed_contraction(log)
    assert len(rates) == 1 and rates[0] <= 1e-8


@pytest.mark.parametrize("executor", ["thread", "process"])
def test_worker_count_determinism(lq_case, executor):
    _, prob, bc, ref = lq_case
    part = partition(1, 201, 4, 3)
    logs = []
    for w in (1, 4):
        cfg = SchwarzConfig(worker_count=w, record_error_vs_reference=ref, executor=executor)
        logs.append(schwarz_solve(prob, bc, part, cfg, None)[1])
    for key in ("r", "s", "err_inf"):
        np.testing.assert_allclose(getattr(logs[0], key), getattr(logs[1], key), rtol=0, atol=1e-12)


def test_log_csv(tmp_path, lq_case):
    _, prob, bc, ref = lq_case
    _, log, _ = schwarz_solve(prob, bc, partition(1, 201, 4, 6),
                              SchwarzConfig(record_error_vs_reference=ref), None)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "r", "s", "err_inf", "wall_ms"]
    assert len(rows) == len(log) + 1
    assert float(rows[1][1]) == log.r[0]


def test_subproblem_failure_carries_log(lq_case):
    from tempo.cstr import CstrConfig, build_cstr_problem, default_boundary

    cfg = CstrConfig(horizon_N=40)
    prob = build_cstr_problem(cfg)
    bc = default_boundary(cfg)
    scfg = SchwarzConfig(solver_options=SolverOptions(max_newton_iters=1))
    with pytest.raises(SubproblemError) as exc:
        schwarz_solve(prob, bc, partition(prob.horizon_start, prob.horizon_end, 2, 2), scfg,
                      None)
    assert isinstance(exc.value.log, IterationLog)
    assert exc.value.subdomain == 0


def test_config_validation():
    with pytest.raises(ValidationError):
        SchwarzConfig(eps_primal=0.0)
    with pytest.raises(ValidationError):
        SchwarzConfig(worker_count=0)
    with pytest.raises(ValidationError):
        SchwarzConfig(executor="gpu")
