"""Boundary-value subproblem solvers.

``solve_lq`` runs one Riccati sweep on the LQ KKT system. ``solve_nlp`` is a
primal-dual interior-point method whose Newton systems are solved with the
same stage-wise recursion, so every iteration costs O(N - M).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import EvaluationError, FactorizationError, ValidationError
from .ocp import (
    BoundaryCondition,
    KktResidual,
    LqProblemData,
    OcpProblem,
    PrimalDualTrajectory,
    StageEval,
    _check_traj_dims,
    kkt_residual_from_eval,
    make_lq_problem,
)

_SLACK_FLOOR = 1e-8
_MAX_BACKTRACK = 20
_MAX_REG = 1e10


@dataclass(frozen=True)
class SolverOptions:
    """Interior-point settings.

    ``hessian`` selects the stage Hessian: ``"exact"`` uses the problem's
    Lagrangian Hessian, ``"gauss_newton"`` keeps only the cost curvature and
    ``"auto"`` picks exact when the problem provides it.
    """

    kkt_tol: float = 1e-8
    max_newton_iters: int = 100
    barrier_initial: float = 1e-1
    barrier_reduction: float = 0.2
    fraction_to_boundary: float = 0.995
    regularization_floor: float = 1e-12
    hessian: str = "auto"

    def __post_init__(self):
        for name in ("kkt_tol", "barrier_initial", "regularization_floor"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.max_newton_iters < 1:
            raise ValidationError("max_newton_iters must be >= 1")
        for name in ("barrier_reduction", "fraction_to_boundary"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.hessian not in ("auto", "exact", "gauss_newton"):
            raise ValidationError(f"unknown hessian mode {self.hessian!r}")

    @property
    def barrier_min(self) -> float:
        return 0.1 * self.kkt_tol


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    final_kkt: KktResidual
    wall_time: float
    status: str = "converged"
    barrier: float = 0.0
    regularization: float = 0.0

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "final_kkt": self.final_kkt.as_dict(),
            "wall_time": self.wall_time,
        }


# --------------------------------------------------------------------------- LQ


def solve_lq(
    data: LqProblemData,
    M: int,
    N: int,
    bc: BoundaryCondition,
    opts: SolverOptions | None = None,
    problem: OcpProblem | None = None,
) -> tuple[PrimalDualTrajectory, SolveReport]:
    """Solve the LQ subproblem on ``M..N`` exactly with one Riccati sweep."""
    t0 = time.perf_counter()
    opts = opts or SolverOptions()
    if N <= M:
        raise ValidationError("N must exceed M")
    problem = problem or make_lq_problem(data, M, N)
    n, nx, nu = N - M, data.n_x, data.n_u
    if bc.x_init.shape != (nx,):
        raise ValidationError(f"boundary condition has length {bc.x_init.size}, expected {nx}")
    Wxx = np.broadcast_to(2 * data.Q, (n, nx, nx))
    Wuu = np.broadcast_to(2 * data.R, (n, nu, nu))
    X, dU, Lam = kernels.riccati_solve(
        Wxx,
        np.zeros((n, nx, nu)),
        Wuu,
        np.broadcast_to(-data.f_lin, (n, nx)),
        np.zeros((n, nu)),
        np.broadcast_to(data.A, (n, nx, nx)),
        np.broadcast_to(data.B, (n, nx, nu)),
        np.broadcast_to(data.c, (n, nx)),
        bc.x_init,
        bc.lambda_terminal,
        stage_offset=M,
    )
    traj = PrimalDualTrajectory(M, X, dU, Lam, np.zeros((n, 0)))
    kkt = kkt_residual_from_eval(problem.evaluate(X, dU), traj, bc)
    report = SolveReport(
        converged=kkt.max() <= opts.kkt_tol,
        iterations=1,
        final_kkt=kkt,
        wall_time=time.perf_counter() - t0,
        status="converged" if kkt.max() <= opts.kkt_tol else "inaccurate",
    )
    return traj, report


def solve(
    problem: OcpProblem,
    bc: BoundaryCondition,
    warm_start: PrimalDualTrajectory | None = None,
    opts: SolverOptions | None = None,
) -> tuple[PrimalDualTrajectory, SolveReport]:
    """Dispatch to :func:`solve_lq` for pure LQ problems, else :func:`solve_nlp`."""
    if problem.lq_data is not None and problem.n_g == 0:
        return solve_lq(
            problem.lq_data, problem.horizon_start, problem.horizon_end, bc, opts, problem
        )
    return solve_nlp(problem, bc, warm_start, opts)


# --------------------------------------------------------------------------- NLP


def _stage_hessian(problem: OcpProblem, mode: str, X, U, Lam, Mu) -> np.ndarray:
    stages = problem.stages
    if mode in ("auto", "exact") and problem.lagrangian_hessian is not None:
        return np.asarray(problem.lagrangian_hessian(X[:-1], U, Lam[1:], Mu, stages), dtype=float)
    if mode == "exact":
        raise ValidationError("hessian='exact' needs problem.lagrangian_hessian")
    if problem.cost_hessian is not None:
        return np.stack(
            [np.asarray(problem.cost_hessian(X[k], U[k], int(i)), dtype=float)
             for k, i in enumerate(stages)]
        )
    return _fd_cost_hessian(problem, X[:-1], U)


def _fd_cost_hessian(problem: OcpProblem, Xs, U, step: float = 1e-6) -> np.ndarray:
    """Central differences of the stage cost gradients (Gauss-Newton fallback)."""
    nx, nu = problem.n_x, problem.n_u
    H = np.zeros((len(Xs), nx + nu, nx + nu))
    for j in range(nx + nu):
        Xp, Xm, Up, Um = Xs.copy(), Xs.copy(), U.copy(), U.copy()
        if j < nx:
            Xp[:, j] += step
            Xm[:, j] -= step
        else:
            Up[:, j - nx] += step
            Um[:, j - nx] -= step
        ep, em = problem.evaluate_stages(Xp, Up), problem.evaluate_stages(Xm, Um)
        gp = np.hstack([ep.lx, ep.lu])
        gm = np.hstack([em.lx, em.lu])
        H[:, :, j] = (gp - gm) / (2 * step)
    return 0.5 * (H + np.transpose(H, (0, 2, 1)))


def _max_step(v, dv, tau) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


@dataclass
class _Iterate:
    X: np.ndarray
    U: np.ndarray
    Lam: np.ndarray
    Mu: np.ndarray
    S: np.ndarray
    ev: StageEval = field(repr=False, default=None)


def _initial_iterate(problem, bc, warm) -> _Iterate:
    n, nx, nu, ng = problem.n_stages, problem.n_x, problem.n_u, problem.n_g
    if warm is None and problem.initial_guess is not None:
        warm = problem.initial_guess(bc, problem.horizon_start, n)
    if warm is None:
        X = np.tile(bc.x_init, (n + 1, 1))
        U = np.zeros((n, nu))
        Lam = np.zeros((n + 1, nx))
        Mu = np.ones((n, ng))
    else:
        _check_traj_dims(problem, warm, bc)
        X, U, Lam = warm.states.copy(), warm.inputs.copy(), warm.costates.copy()
        Mu = warm.ineq_multipliers.copy()
    X[0] = bc.x_init
    Lam[-1] = bc.lambda_terminal
    return _Iterate(X, U, Lam, np.maximum(Mu, _SLACK_FLOOR), np.zeros((n, ng)))


def solve_nlp(
    problem: OcpProblem,
    bc: BoundaryCondition,
    warm_start: PrimalDualTrajectory | None = None,
    opts: SolverOptions | None = None,
) -> tuple[PrimalDualTrajectory, SolveReport]:
    """Primal-dual interior-point solve of the subproblem with boundary data ``bc``.

    Parameters
    ----------
    problem : OcpProblem
        Problem on the window ``M..N``.
    bc : BoundaryCondition
        Initial state ``x_M`` and terminal costate ``lam_N``.
    warm_start : PrimalDualTrajectory, optional
        Starting point; multipliers are clipped into the interior.
    opts : SolverOptions, optional

    Returns
    -------
    traj, report
        The best iterate found and a report. Exceeding the iteration budget
        is reported through ``report.converged`` rather than raised.
    """
    t0 = time.perf_counter()
    opts = opts or SolverOptions()
    n, nx, nu, ng = problem.n_stages, problem.n_x, problem.n_u, problem.n_g
    M = problem.horizon_start
    it = _initial_iterate(problem, bc, warm_start)
    it.ev = problem.evaluate(it.X, it.U)
    if ng:
        # rows at the pinned stage that the input cannot move
        fixed = np.all(it.ev.gu[0] == 0.0, axis=1) & (it.ev.g[0] > 0.0)
        if np.any(fixed):
            traj = PrimalDualTrajectory(M, it.X, it.U, it.Lam, it.Mu)
            kkt = kkt_residual_from_eval(it.ev, traj, bc)
            return traj, SolveReport(False, 0, kkt, time.perf_counter() - t0,
                                     status="infeasible_boundary")
        it.S = np.maximum(-it.ev.g, _SLACK_FLOOR)
        tau = float(np.clip(np.mean(it.S * it.Mu), opts.barrier_min, opts.barrier_initial))
    else:
        tau = 0.0
    ftb = opts.fraction_to_boundary
    reg = 0.0
    best = None
    status = "max_iter"
    iters = 0

    def snapshot(state: _Iterate) -> PrimalDualTrajectory:
        return PrimalDualTrajectory(M, state.X, state.U, state.Lam, state.Mu)

    for iters in range(opts.max_newton_iters + 1):
        traj = snapshot(it)
        kkt = kkt_residual_from_eval(it.ev, traj, bc)
        if best is None or kkt.max() < best[1].max():
            best = (traj.copy(), kkt)
        if kkt.max() <= opts.kkt_tol:
            status = "converged"
            break
        if iters == opts.max_newton_iters:
            break
        ev = it.ev
        if ng:
            tau = _update_barrier(tau, kkt, it, opts)
        # condensed stage QP
        W = _stage_hessian(problem, opts.hessian, it.X, it.U, it.Lam, it.Mu).copy()
        qx, qu = ev.lx.copy(), ev.lu.copy()
        if ng:
            sig = it.Mu / it.S
            C = np.concatenate([ev.gx, ev.gu], axis=2)
            W += np.einsum("kgi,kg,kgj->kij", C, sig, C)
            w = tau / it.S + sig * (ev.g + it.S)
            qx += np.einsum("kgi,kg->ki", ev.gx, w)
            qu += np.einsum("kgi,kg->ki", ev.gu, w)
        e = ev.f - it.X[1:]
        dx0 = bc.x_init - it.X[0]
        sol, reg = _regularized_riccati(
            W, qx, qu, ev.fx, ev.fu, e, dx0, bc.lambda_terminal, reg, opts, M
        )
        if sol is None:
            status = "inertia_failure"
            break
        dX, dU, lam_new = sol
        if ng:
            Cd = np.einsum("kgi,ki->kg", ev.gx, dX[:-1]) + np.einsum("kgi,ki->kg", ev.gu, dU)
            dS = -(ev.g + it.S) - Cd
            mu_new = tau / it.S + sig * (ev.g + it.S + Cd)
            dMu = mu_new - it.Mu
            a_p = _max_step(it.S, dS, ftb)
            a_d = _max_step(it.Mu, dMu, ftb)
        else:
            dS = dMu = np.zeros((n, 0))
            a_p = a_d = 1.0
        dLam = lam_new - it.Lam
        it = _take_step(problem, it, (dX, dU, dLam, dMu, dS), a_p, a_d, M)

    traj, kkt = best
    traj.costates[-1] = bc.lambda_terminal
    report = SolveReport(
        converged=status == "converged",
        iterations=iters,
        final_kkt=kkt,
        wall_time=time.perf_counter() - t0,
        status=status,
        barrier=tau,
        regularization=reg,
    )
    return traj, report


def _update_barrier(tau, kkt: KktResidual, it: _Iterate, opts: SolverOptions) -> float:
    err = max(
        kkt.stationarity_x,
        kkt.stationarity_u,
        kkt.primal_feas,
        float(np.max(np.abs(it.ev.g + it.S))),
    )
    comp = it.S * it.Mu
    while tau > opts.barrier_min:
        if max(err, float(np.max(np.abs(comp - tau)))) > tau:
            break
        tau = max(opts.barrier_min, opts.barrier_reduction * tau)
    return tau


def _regularized_riccati(W, qx, qu, A, B, e, dx0, lam_T, reg, opts, M):
    """Riccati solve with inertia correction: ``delta`` doubles until every
    reduced stage Hessian is positive definite."""
    nx = qx.shape[1]
    Wxx, Wxu, Wuu = W[:, :nx, :nx], W[:, :nx, nx:], W[:, nx:, nx:]
    # retry from a reduced level of the previous correction
    delta = max(opts.regularization_floor, reg / 4) if reg > 0 else opts.regularization_floor
    first = True
    while delta <= _MAX_REG:
        try:
            out = kernels.riccati_solve(
                Wxx, Wxu, Wuu, qx, qu, A, B, e, dx0, lam_T, delta, stage_offset=M
            )
            return out, (delta if not first or reg > 0 else 0.0)
        except FactorizationError:
            first = False
            delta = max(2 * delta, 1e-10)
    return None, delta


def _take_step(problem, it: _Iterate, d, a_p, a_d, M) -> _Iterate:
    dX, dU, dLam, dMu, dS = d
    last_exc = None
    for _ in range(_MAX_BACKTRACK):
        X = it.X + a_p * dX
        U = it.U + a_p * dU
        try:
            ev = problem.evaluate(X, U)
        except EvaluationError as exc:
            last_exc = exc
            a_p *= 0.5
            a_d *= 0.5
            continue
        return _Iterate(
            X,
            U,
            it.Lam + a_p * dLam,
            np.maximum(it.Mu + a_d * dMu, 1e-300) if dMu.size else it.Mu,
            np.maximum(it.S + a_p * dS, 1e-300) if dS.size else it.S,
            ev,
        )
    raise last_exc


# --------------------------------------------------------------------------- small dense NLP


@dataclass
class DenseResult:
    z: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    objective: float
    converged: bool
    iterations: int
    residual: float


def solve_dense_nlp(
    objective: Callable,
    equality: Callable,
    inequality: Callable,
    hessian: Callable,
    z0: np.ndarray,
    opts: SolverOptions | None = None,
) -> DenseResult:
    """Interior-point method for a small dense NLP.

    ``objective(z) -> (value, grad)``, ``equality(z) -> (h, J_h)`` and
    ``inequality(z) -> (g, J_g)`` with ``g <= 0``; ``hessian(z, y, mu)`` is
    the Hessian of the Lagrangian ``f + y'h + mu'g``.
    """
    opts = opts or SolverOptions()
    z = np.array(z0, dtype=float)
    h, Jh = equality(z)
    g, Jg = inequality(z)
    m, p, nz = len(h), len(g), len(z)
    tau = opts.barrier_initial
    s = np.maximum(-g, 1e-2)
    mu = tau / s
    # least-squares equality multipliers from stationarity
    y = np.linalg.lstsq(Jh.T, -(objective(z)[1] + Jg.T @ mu), rcond=None)[0] if m else np.zeros(0)
    ftb = opts.fraction_to_boundary
    delta = 0.0
    res = math.inf
    converged = False
    iters = 0
    for iters in range(opts.max_newton_iters + 1):
        f, gf = objective(z)
        h, Jh = equality(z)
        g, Jg = inequality(z)
        stat = gf + Jh.T @ y + Jg.T @ mu
        res = max(
            _norm(stat), _norm(h), max(0.0, float(np.max(g))) if p else 0.0,
            _norm(mu * g), max(0.0, -float(np.min(mu))) if p else 0.0,
        )
        if res <= opts.kkt_tol:
            converged = True
            break
        if iters == opts.max_newton_iters:
            break
        barrier_err = max(_norm(stat), _norm(h), _norm(g + s), _norm(s * mu - tau))
        while tau > opts.barrier_min and barrier_err <= tau:
            tau = max(opts.barrier_min, opts.barrier_reduction * tau)
        sig = mu / s
        W = hessian(z, y, mu) + Jg.T @ (sig[:, None] * Jg)
        rhs_z = -(gf + Jg.T @ (tau / s + sig * (g + s)))
        # KKT matrix [W + delta I, Jh'; Jh, 0] must have inertia (nz, m, 0)
        delta = max(opts.regularization_floor, delta / 4) if delta > 0 else 0.0
        while True:
            K = np.block([[W + delta * np.eye(nz), Jh.T], [Jh, -1e-14 * np.eye(m)]])
            ev = np.linalg.eigvalsh(0.5 * (K + K.T))
            if np.sum(ev > 0) == nz and np.sum(ev < 0) == m:
                break
            delta = max(2 * delta, 1e-8)
            if delta > _MAX_REG:
                raise FactorizationError(0)
        sol = np.linalg.solve(K, np.concatenate([rhs_z, -h]))
        dz, y_new = sol[:nz], sol[nz:]
        ds = -(g + s) - Jg @ dz
        mu_new = tau / s + sig * (g + s + Jg @ dz)
        a_p = _max_step(s, ds, ftb)
        a_d = _max_step(mu, mu_new - mu, ftb)
        # backtrack on an l1 merit function; the steady-state problem is
        # strongly nonlinear and full Newton steps can leave the basin
        nu = 1.0 + _norm(y_new) + _norm(mu_new)

        def merit(zz, ss):
            hh, gg = equality(zz)[0], inequality(zz)[0]
            theta = np.sum(np.abs(hh)) + np.sum(np.abs(gg + ss))
            return objective(zz)[0] - tau * np.sum(np.log(ss)) + nu * theta, theta

        phi0, theta0 = merit(z, s)
        for _ in range(30):
            z_t, s_t = z + a_p * dz, s + a_p * ds
            with np.errstate(all="ignore"):
                phi, theta = merit(z_t, s_t)
            # accept on merit decrease or on a clear feasibility gain
            if np.isfinite(phi) and (phi <= phi0 + 1e-12 * abs(phi0) or theta <= 0.5 * theta0):
                break
            a_p *= 0.5
        z = z + a_p * dz
        s = s + a_p * ds
        y = y + a_p * (y_new - y)
        mu = mu + a_d * (mu_new - mu)
    f, _ = objective(z)
    return DenseResult(z, y, mu, float(f), converged, iters, float(res))


def _norm(a) -> float:
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0
