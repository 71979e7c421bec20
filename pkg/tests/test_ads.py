import csv
import json

import numpy as np
import pytest

from tempo.ads import SensitivitySamples, estimate_epsilon, sample_sensitivity
from tempo.errors import TempoError, ValidationError
from tempo.lq_theory import closed_form_sensitivity, compute_bounds, split_primal
from tempo.ocp import BoundaryCondition, LqProblemData, PrimalDualTrajectory, make_lq_problem, random_lq_data
from tempo.subsolver import SolveReport, solve


def _lq(rng, nx=2, N=60):
    data = random_lq_data(rng, nx, spectral_radius=0.9)
    bc = BoundaryCondition(rng.standard_normal(nx), rng.standard_normal(nx))
    return data, make_lq_problem(data, 1, N), bc


def test_zero_perturbation_reproduces_reference(rng):
    _, prob, bc = _lq(rng)
    s = sample_sensitivity(prob, bc, 4, 0.1, 0, deltas=np.zeros((4, 4)))
    for _, traj in s.perturbed:
        assert traj.max_abs_diff(s.reference, with_inputs=True) == 0.0
    with pytest.raises(TempoError, match="too small"):
        estimate_epsilon(s)


def test_lq_deviation_matches_closed_form(rng):
    data, prob, bc = _lq(rng, nx=2, N=40)
    s = sample_sensitivity(prob, bc, 3, 0.1, 5)
    for delta, traj in s.perturbed:
        pert = BoundaryCondition(bc.x_init + delta[:2], bc.lambda_terminal + delta[2:])
        dw, dlam = closed_form_sensitivity(data, 40, bc, pert)
        dX, _ = split_primal(dw, 2, 40)
        np.testing.assert_allclose(s.reference.states - traj.states, dX, atol=1e-8)
        np.testing.assert_allclose(s.reference.costates - traj.costates, dlam, atol=1e-8)


def test_synthetic_geometric_fit():
    N, rho, C = 60, 0.5, 3.0
    ref = PrimalDualTrajectory(0, np.zeros((N + 1, 1)), np.zeros((N, 1)), np.zeros((N + 1, 1)))
    d = np.minimum(np.arange(N + 1), N - np.arange(N + 1))
    dev = C * rho ** d
    pert = PrimalDualTrajectory(0, dev.reshape(-1, 1), np.zeros((N, 1)), np.zeros((N + 1, 1)))
    pert2 = PrimalDualTrajectory(0, 0.5 * dev.reshape(-1, 1), np.zeros((N, 1)), np.zeros((N + 1, 1)))
    s = SensitivitySamples(ref, [(np.array([1.0, -1.0]), pert), (np.array([1.0, 0.0]), pert2)], 1.0, 0)
    rep = estimate_epsilon(s)
    assert abs(rep.rho_fit - rho) <= 1e-12
    assert rep.decays and rep.fit_range[0] == 3
    np.testing.assert_allclose(rep.eps_hat, C * rho ** np.arange(N // 2 + 1), rtol=1e-14)


def test_flat_deviation_does_not_decay():
    N = 40
    ref = PrimalDualTrajectory(0, np.zeros((N + 1, 1)), np.zeros((N, 1)), np.zeros((N + 1, 1)))
    flat = PrimalDualTrajectory(0, np.full((N + 1, 1), 0.3), np.zeros((N, 1)), np.zeros((N + 1, 1)))
    s = SensitivitySamples(ref, [(np.ones(2), flat)] * 2, 1.0, 0)
    assert not estimate_epsilon(s).decays


def test_scale_invariance_on_lq(rng):
    _, prob, bc = _lq(rng)
    a = estimate_epsilon(sample_sensitivity(prob, bc, 10, 0.1, 3))
    b = estimate_epsilon(sample_sensitivity(prob, bc, 10, 0.2, 3))
    np.testing.assert_allclose(a.eps_hat, b.eps_hat, rtol=0, atol=1e-8)


def test_scalar_lq_rate_below_envelope():
    data = LqProblemData([[0.5]], [[1.0]], [0.0], [[1.0]], [[1.0]], [0.0])
    prob = make_lq_problem(data, 1, 60)
    rep = estimate_epsilon(sample_sensitivity(prob, BoundaryCondition([1.0], [0.5]), 10, 0.1, 0))
    bounds = compute_bounds(data)
    assert rep.decays
    assert rep.rho_fit <= bounds.rho ** (1 / data.n_x) + 0.05


def test_worker_count_does_not_change_samples(rng):
    _, prob, bc = _lq(rng)
    a = sample_sensitivity(prob, bc, 6, 0.1, 11, worker_count=1)
    b = sample_sensitivity(prob, bc, 6, 0.1, 11, worker_count=3)
    for (da, ta), (db, tb) in zip(a.perturbed, b.perturbed):
        np.testing.assert_array_equal(da, db)
        np.testing.assert_array_equal(ta.z, tb.z)


def test_failures_are_counted_then_fatal(rng):
    _, prob, bc = _lq(rng)
    calls = {"n": 0}

    def flaky(problem, bcx, warm, opts):
        calls["n"] += 1
        traj, rep = solve(problem, bcx, warm, opts)
        if warm is not None and np.all(bcx.x_init > bc.x_init):
            rep = SolveReport(False, 1, rep.final_kkt, 0.0, status="max_iter")
        return traj, rep

    s = sample_sensitivity(prob, bc, 20, 0.1, 2, solver=flaky)
    assert 0 < s.n_failed < 20 and len(s.perturbed) == 20 - s.n_failed
    assert all(status == "max_iter" for _, status in s.failures)

    def broken(problem, bcx, warm, opts):
        traj, rep = solve(problem, bcx, warm, opts)
        if warm is not None:
            raise TempoError("boom")
        return traj, rep

    with pytest.raises(TempoError, match="failed"):
        sample_sensitivity(prob, bc, 5, 0.1, 2, solver=broken)


def test_argument_validation(rng):
    _, prob, bc = _lq(rng)
    with pytest.raises(ValidationError):
        sample_sensitivity(prob, bc, 0, 0.1, 0)
    with pytest.raises(ValidationError):
        sample_sensitivity(prob, bc, 3, 0.0, 0)
    short = make_lq_problem(random_lq_data(rng, 2), 1, 6)
    s = sample_sensitivity(short, bc, 3, 0.1, 0)
    with pytest.raises(ValidationError, match="horizon"):
        estimate_epsilon(s)


def test_exports(tmp_path, rng):
    _, prob, bc = _lq(rng)
    rep = estimate_epsilon(sample_sensitivity(prob, bc, 5, 0.1, 0))
    rep.to_csv(tmp_path / "eps.csv")
    rows = list(csv.reader((tmp_path / "eps.csv").open()))
    assert rows[0] == ["d", "eps_hat"] and len(rows) == len(rep.eps_hat) + 1
    rep.to_json(tmp_path / "r.json", {"seed": 0})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert {"rho_fit", "decays", "fit_range", "n_failed", "seed"} <= set(doc)


@pytest.mark.slow
def test_cstr_boundary_deviations_dominate():
    from tempo.cstr import CstrConfig, build_cstr_problem, default_boundary

    cfg = CstrConfig(rho_reg=0.5, horizon_N=600)
    s = sample_sensitivity(build_cstr_problem(cfg), default_boundary(cfg), 30, 0.1, 1)
    rep = estimate_epsilon(s)
    mid = rep.eps_hat[len(rep.eps_hat) // 2]
    assert rep.eps_hat[0] > 1e3 * mid
