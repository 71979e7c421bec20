"""Economic MPC benchmark: an exothermic CSTR with a series reaction.

States are the concentrations ``c_A``, ``c_B`` and the temperature ``T`` in
dimensionless units; the input ``u`` is the coolant temperature. The stage
cost trades the product yield ``-c_B`` against a quadratic pull toward the
steady-state input ``u_s``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import kernels
from ._fallback import cstr_predict, cstr_rhs as _batched_rhs
from .errors import TempoError, ValidationError
from .ocp import (
    BoundaryCondition,
    OcpProblem,
    PrimalDualTrajectory,
    StageEval,
    discretize_implicit_euler,
)
from .subsolver import SolverOptions, solve_dense_nlp

U_MIN = 0.049
U_MAX = 0.449
N_X, N_U, N_G = 3, 1, 5


@dataclass(frozen=True)
class CstrConfig:
    """Benchmark configuration; ``u_s`` and ``x0`` are filled in by :meth:`resolved`."""

    rho_reg: float = 0.5
    horizon_N: int = 180
    substeps: int = 4
    control_dt: float = 1.0
    u_s: float | None = None
    x0: tuple | None = None

    def __post_init__(self):
        if self.horizon_N < 2:
            raise ValidationError("horizon_N must be >= 2")
        if self.substeps < 1:
            raise ValidationError("substeps must be >= 1")
        if self.rho_reg < 0:
            raise ValidationError("rho_reg must be nonnegative")

    def resolved(self) -> "CstrConfig":
        x_s, u_s = solve_steady_state(self.rho_reg)
        x0 = self.x0
        if x0 is None:
            x0 = tuple(x_s * np.array([1.1, 1.0, 1.0]))
        return replace(self, u_s=u_s if self.u_s is None else self.u_s, x0=tuple(map(float, x0)))

    def metadata(self) -> dict:
        cfg = self.resolved()
        return {
            "rho_reg": cfg.rho_reg,
            "horizon_N": cfg.horizon_N,
            "substeps": cfg.substeps,
            "control_dt": cfg.control_dt,
            "u_s": cfg.u_s,
            "x0": list(cfg.x0),
        }


def ode_rhs(x, u):
    """Continuous-time right-hand side with its Jacobians ``(F, F_x, F_u)``."""
    y = np.asarray(x, dtype=float).reshape(1, 3)
    F, Fy = _batched_rhs(y, np.atleast_1d(np.asarray(u, dtype=float)).reshape(1))[:2]
    return F[0], Fy[0], np.array([[0.0], [0.0], [1.0]])


def predict_substep(x, u, h):
    """Closed-form implicit-Euler substep used to seed Newton."""
    y = np.asarray(x, dtype=float).reshape(1, 3)
    return cstr_predict(y, float(np.ravel(u)[0]), h)[0]


# --------------------------------------------------------------------------- steady state


_G_X = np.array(
    [[-1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0], [0, 0, 0], [0, 0, 0]]
)
_G_U = np.array([[0.0], [0.0], [0.0], [-1.0], [1.0]])


def _ineq(x, u) -> np.ndarray:
    return np.array([-x[0], -x[1], -x[2], U_MIN - u, u - U_MAX])


class _ReducedSteadyState:
    """Steady-state problem in the input alone: ``x(u)`` solves ``F(x, u) = 0``."""

    def __init__(self):
        self._cache = {}

    def state(self, u: float):
        key = float(u)
        if key not in self._cache:
            x = equilibrium(key)
            _, Fx, Fu = ode_rhs(x, key)
            self._cache[key] = (x, -np.linalg.solve(Fx, Fu)[:, 0])
        return self._cache[key]

    def objective(self, z):
        x, dx = self.state(z[0])
        return -x[1], np.array([-dx[1]])

    def equality(self, z):
        return np.zeros(0), np.zeros((0, 1))

    def inequality(self, z):
        x, dx = self.state(z[0])
        return _ineq(x, z[0]), np.concatenate([-dx, [-1.0, 1.0]]).reshape(5, 1)

    def hessian(self, z, y, mu, step=1e-6):
        # curvature of -c_B(u); the inequality rows are smooth but their
        # curvature is negligible next to the barrier terms
        gp = self.objective(z + step)[1]
        gm = self.objective(z - step)[1]
        return ((gp - gm) / (2 * step)).reshape(1, 1)


def equilibrium(u: float, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """State with ``ode_rhs(x, u) = 0``, by damped Newton from the feed state."""
    x = np.array([1.0, 0.0, u])
    for _ in range(max_iter):
        F, Fx, _ = ode_rhs(x, u)
        if np.max(np.abs(F)) <= tol:
            return x
        dx = np.linalg.solve(Fx, -F)
        a = 1.0
        while a > 1e-6:
            trial = x + a * dx
            if trial[0] >= 0 and np.max(np.abs(ode_rhs(trial, u)[0])) < np.max(np.abs(F)):
                break
            a *= 0.5
        x = trial
    raise TempoError(f"no equilibrium found for u = {u}")


@lru_cache(maxsize=None)
def _steady_state() -> tuple[tuple, float]:
    opts = SolverOptions(kkt_tol=1e-12, max_newton_iters=200)
    best = None
    statuses = []
    for u0 in np.linspace(U_MIN, U_MAX, 16):
        red = _ReducedSteadyState()
        try:
            res = solve_dense_nlp(
                red.objective, red.equality, red.inequality, red.hessian, np.array([u0]), opts
            )
        except TempoError as exc:
            statuses.append(f"u0={u0:.4f}: {exc}")
            continue
        statuses.append(f"u0={u0:.4f}: {'converged' if res.converged else 'not converged'}")
        if res.converged and (best is None or res.objective < best.objective):
            best = res
    if best is None:
        raise TempoError("steady-state search failed: " + "; ".join(statuses))
    u_s = float(best.z[0])
    return tuple(equilibrium(u_s)), u_s


def solve_steady_state(rho_reg: float = 0.0) -> tuple[np.ndarray, float]:
    """Economic steady state maximizing ``c_B``.

    The regularizer vanishes at ``u = u_s``, so the result does not depend on
    ``rho_reg``; the argument is accepted for symmetry with the config.
    """
    x_s, u_s = _steady_state()
    return np.array(x_s), u_s


def steady_state_costate(cfg: CstrConfig) -> np.ndarray:
    """Costate of the stationary trajectory, ``lam = grad_x l + f_x' lam``."""
    cfg = cfg.resolved()
    x_s, u_s = solve_steady_state(cfg.rho_reg)
    h = cfg.control_dt / cfg.substeps
    _, fx, _, _ = kernels.cstr_step(x_s.reshape(1, 3), np.array([u_s]), h, cfg.substeps)
    lx = np.array([0.0, -1.0, 0.0])
    return np.linalg.solve(np.eye(3) - fx[0].T, lx)


# --------------------------------------------------------------------------- OCP


def build_cstr_problem(cfg: CstrConfig, start: int = 1) -> OcpProblem:
    """Discretized benchmark on stages ``start..start + horizon_N - 1``."""
    cfg = cfg.resolved()
    rho, u_s, nsub = cfg.rho_reg, cfg.u_s, cfg.substeps
    h = cfg.control_dt / nsub
    step = discretize_implicit_euler(ode_rhs, cfg.control_dt, nsub, predictor=predict_substep)
    lam_s = steady_state_costate(cfg)

    def stage_cost(x, u, i):
        du = float(u[0]) - u_s
        return -float(x[1]) + rho * du * du, np.array([0.0, -1.0, 0.0]), np.array([2 * rho * du])

    def inequality(x, u, i):
        return _ineq(x, float(np.ravel(u)[0])), _G_X, _G_U

    def batch(X, U, stages):
        n = len(stages)
        U = np.asarray(U, dtype=float).reshape(n, 1)
        f, fx, fu, _ = kernels.cstr_step(X, U, h, nsub, stage_offset=int(stages[0]))
        du = U[:, 0] - u_s
        g = np.column_stack([-X, U_MIN - U[:, 0], U[:, 0] - U_MAX])
        return StageEval(
            l=-X[:, 1] + rho * du * du,
            lx=np.broadcast_to([0.0, -1.0, 0.0], (n, 3)),
            lu=(2 * rho * du).reshape(n, 1),
            f=f,
            fx=fx,
            fu=fu,
            g=g,
            gx=np.broadcast_to(_G_X, (n, 5, 3)),
            gu=np.broadcast_to(_G_U, (n, 5, 1)),
        )

    def lag_hess(X, U, lam_next, mu, stages):
        _, _, _, H = kernels.cstr_step(
            X, U, h, nsub, lam=lam_next, stage_offset=int(stages[0])
        )
        H[:, 3, 3] += 2 * rho
        return H

    def cost_hessian(x, u, i):
        H = np.zeros((4, 4))
        H[3, 3] = 2 * rho
        return H

    return OcpProblem(
        horizon_start=start,
        horizon_end=start + cfg.horizon_N - 1,
        n_x=N_X,
        n_u=N_U,
        n_g=N_G,
        stage_cost=stage_cost,
        dynamics=step,
        inequality=inequality,
        cost_hessian=cost_hessian,
        lagrangian_hessian=lag_hess,
        batch_evaluate=batch,
        initial_guess=_RestrictableGuess(u_s, h, nsub, lam_s),
        name=f"cstr(rho_reg={rho:g})",
    )


@dataclass(frozen=True)
class _RestrictableGuess:
    """Forward run at the steady-state input, valid for any window."""

    u_s: float
    h: float
    substeps: int
    lam_s: np.ndarray

    def __call__(self, bc: BoundaryCondition, start: int, n: int) -> PrimalDualTrajectory:
        return simulate_guess(bc, start, n, self.u_s, self.h, self.substeps, self.lam_s)


def simulate_guess(bc, start, n, u_s, h, substeps, lam) -> PrimalDualTrajectory:
    X = np.empty((n + 1, 3))
    X[0] = bc.x_init
    U = np.full((n, 1), u_s)
    for k in range(n):
        X[k + 1] = kernels.cstr_step(X[k : k + 1], U[k], h, substeps)[0][0]
    Lam = np.tile(lam, (n + 1, 1))
    Lam[-1] = bc.lambda_terminal
    g = np.column_stack([-X[:-1], U_MIN - U[:, 0], U[:, 0] - U_MAX])
    Mu = 0.1 / np.maximum(-g, 1e-2)
    return PrimalDualTrajectory(start, X, U, Lam, Mu)


def default_boundary(cfg: CstrConfig) -> BoundaryCondition:
    """``x_M = x0`` and the steady-state costate as terminal condition."""
    cfg = cfg.resolved()
    return BoundaryCondition(np.array(cfg.x0), steady_state_costate(cfg))


def hold_guess(problem: OcpProblem, bc: BoundaryCondition, u: float) -> PrimalDualTrajectory:
    """Zero-costate guess with the state held at ``x_M`` and a constant input.

    Stands in for the zero trajectory, which lies outside the model's domain
    (``T = 0`` makes the rate terms singular).
    """
    n = problem.n_stages
    X = np.tile(bc.x_init, (n + 1, 1))
    Lam = np.zeros((n + 1, N_X))
    Lam[-1] = bc.lambda_terminal
    return PrimalDualTrajectory(problem.horizon_start, X, np.full((n, 1), u), Lam,
                                np.full((n, N_G), 1e-2))
