"""Discrete-time optimal control problems, trajectories and KKT residuals.

Sign convention
---------------
A problem on the stage window ``M..N`` is

    min  sum_{i=M}^{N-1} l(x_i, u_i, i) + lam_N^T x_N
    s.t. x_M = x_init,  x_{i+1} = f(x_i, u_i, i),  g(x_i, u_i, i) <= 0

and the costates are the gradients of the cost-to-go, so that at a KKT point

    grad_x l_i - lam_i + fx_i^T lam_{i+1} + gx_i^T mu_i = 0
    grad_u l_i         + fu_i^T lam_{i+1} + gu_i^T mu_i = 0
    lam_N = lam_terminal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, EvaluationError, NewtonError, ValidationError

StageCost = Callable[[np.ndarray, np.ndarray, int], tuple]
Dynamics = Callable[[np.ndarray, np.ndarray, int], tuple]


@dataclass
class StageEval:
    """Stacked evaluator output for stages ``M..N-1`` (leading axis = stage)."""

    l: np.ndarray
    lx: np.ndarray
    lu: np.ndarray
    f: np.ndarray
    fx: np.ndarray
    fu: np.ndarray
    g: np.ndarray
    gx: np.ndarray
    gu: np.ndarray


@dataclass(frozen=True)
class OcpProblem:
    """Stage-structured OCP on the window ``horizon_start..horizon_end``.

    ``stage_cost(x, u, i)`` returns ``(l, grad_x, grad_u)``; ``dynamics`` and
    ``inequality`` return ``(value, jac_x, jac_u)``. The optional ``batch_*``
    hooks evaluate all stages at once and are used by the solvers when given.
    ``lagrangian_hessian(X, U, lam_next, mu, stages)`` returns the stacked
    Hessians of ``l + lam_next^T f + mu^T g`` in ``(x, u)``, and
    ``initial_guess(bc, start, n_stages)`` a starting trajectory.
    """

    horizon_start: int
    horizon_end: int
    n_x: int
    n_u: int
    stage_cost: StageCost
    dynamics: Dynamics
    n_g: int = 0
    inequality: Optional[Callable] = None
    cost_hessian: Optional[Callable] = None
    lagrangian_hessian: Optional[Callable] = None
    batch_evaluate: Optional[Callable] = None
    initial_guess: Optional[Callable] = None
    lq_data: Optional["LqProblemData"] = None
    name: str = "ocp"

    def __post_init__(self):
        if self.horizon_end <= self.horizon_start:
            raise ValidationError("horizon_end must exceed horizon_start")
        if self.n_g > 0 and self.inequality is None and self.batch_evaluate is None:
            raise ValidationError("n_g > 0 requires an inequality evaluator")

    @property
    def n_stages(self) -> int:
        return self.horizon_end - self.horizon_start

    @property
    def stages(self) -> np.ndarray:
        return np.arange(self.horizon_start, self.horizon_end)

    def restrict(self, start: int, end: int) -> "OcpProblem":
        """Same stage functions on the sub-window ``start..end``."""
        return replace(self, horizon_start=start, horizon_end=end)

    def evaluate(self, X: np.ndarray, U: np.ndarray) -> StageEval:
        """Evaluate cost, dynamics and inequalities at stages ``M..N-1``."""
        return self.evaluate_stages(X[:-1], U)

    def evaluate_stages(self, Xs: np.ndarray, U: np.ndarray) -> StageEval:
        """Like :meth:`evaluate` but ``Xs`` holds only the ``N - M`` stage states."""
        stages = self.stages
        if self.batch_evaluate is not None:
            ev = self.batch_evaluate(Xs, U, stages)
        else:
            ev = self._loop_evaluate(Xs, U, stages)
        _check_finite(ev, stages)
        return ev

    def _loop_evaluate(self, X, U, stages) -> StageEval:
        n, nx, nu, ng = len(stages), self.n_x, self.n_u, self.n_g
        l = np.empty(n)
        lx, lu = np.empty((n, nx)), np.empty((n, nu))
        f, fx, fu = np.empty((n, nx)), np.empty((n, nx, nx)), np.empty((n, nx, nu))
        g, gx, gu = np.zeros((n, ng)), np.zeros((n, ng, nx)), np.zeros((n, ng, nu))
        for k, i in enumerate(stages):
            x, u = X[k], U[k]
            try:
                out = self.stage_cost(x, u, int(i))
                dyn = self.dynamics(x, u, int(i))
            except NewtonError as exc:
                exc.stage = int(i)
                raise
            l[k] = out[0]
            lx[k] = _shaped(out[1], (nx,), "grad_x l", i)
            lu[k] = _shaped(out[2], (nu,), "grad_u l", i)
            f[k] = _shaped(dyn[0], (nx,), "f", i)
            fx[k] = _shaped(dyn[1], (nx, nx), "f_x", i)
            fu[k] = _shaped(dyn[2], (nx, nu), "f_u", i)
            if ng:
                ineq = self.inequality(x, u, int(i))
                g[k] = _shaped(ineq[0], (ng,), "g", i)
                gx[k] = _shaped(ineq[1], (ng, nx), "g_x", i)
                gu[k] = _shaped(ineq[2], (ng, nu), "g_u", i)
        return StageEval(l, lx, lu, f, fx, fu, g, gx, gu)


def _shaped(value, shape, what, stage) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        if arr.size == int(np.prod(shape)) and arr.ndim <= 1:
            return arr.reshape(shape)
        raise DimensionError(f"{what} has shape {arr.shape}, expected {shape}", stage)
    return arr


def _check_finite(ev: StageEval, stages) -> None:
    for name in ("l", "lx", "lu", "f", "fx", "fu", "g", "gx", "gu"):
        arr = getattr(ev, name)
        if not np.all(np.isfinite(arr)):
            bad = np.nonzero(~np.isfinite(arr.reshape(len(stages), -1)).all(axis=1))[0][0]
            raise EvaluationError(f"non-finite {name}", int(stages[bad]))


@dataclass(frozen=True)
class BoundaryCondition:
    x_init: np.ndarray
    lambda_terminal: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_init, dtype=float).ravel()
        lam = np.asarray(self.lambda_terminal, dtype=float).ravel()
        if x.shape != lam.shape:
            raise DimensionError("x_init and lambda_terminal must have equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            raise ValidationError("boundary condition must be finite")
        object.__setattr__(self, "x_init", x)
        object.__setattr__(self, "lambda_terminal", lam)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.x_init, self.lambda_terminal])

    @classmethod
    def zeros(cls, n_x: int) -> "BoundaryCondition":
        return cls(np.zeros(n_x), np.zeros(n_x))


def _as_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, 1) if a.ndim == 1 else a


@dataclass
class PrimalDualTrajectory:
    """Primal-dual trajectory on stages ``start..start+len(states)-1``.

    Row ``k`` of every array belongs to absolute stage ``start + k``.
    """

    start: int
    states: np.ndarray
    inputs: np.ndarray
    costates: np.ndarray
    ineq_multipliers: np.ndarray = field(default=None)

    def __post_init__(self):
        self.states = _as_rows(self.states)
        self.inputs = _as_rows(self.inputs)
        self.costates = _as_rows(self.costates)
        if self.ineq_multipliers is None:
            self.ineq_multipliers = np.zeros((len(self.inputs), 0))
        self.ineq_multipliers = _as_rows(self.ineq_multipliers)

    @property
    def end(self) -> int:
        return self.start + len(self.states) - 1

    @property
    def z(self) -> np.ndarray:
        """Per-stage primal-dual pairs ``(x_i, lam_i)``."""
        return np.hstack([self.states, self.costates])

    @classmethod
    def zeros(cls, problem: OcpProblem) -> "PrimalDualTrajectory":
        n = problem.n_stages
        return cls(
            problem.horizon_start,
            np.zeros((n + 1, problem.n_x)),
            np.zeros((n, problem.n_u)),
            np.zeros((n + 1, problem.n_x)),
            np.zeros((n, problem.n_g)),
        )

    def copy(self) -> "PrimalDualTrajectory":
        return PrimalDualTrajectory(
            self.start,
            self.states.copy(),
            self.inputs.copy(),
            self.costates.copy(),
            self.ineq_multipliers.copy(),
        )

    def window(self, start: int, end: int) -> "PrimalDualTrajectory":
        """Copy of the stages ``start..end`` (absolute indices)."""
        if start < self.start or end > self.end or end < start:
            raise DimensionError(f"window {start}..{end} outside {self.start}..{self.end}")
        a, b = start - self.start, end - self.start
        return PrimalDualTrajectory(
            start,
            self.states[a : b + 1].copy(),
            self.inputs[a:b].copy(),
            self.costates[a : b + 1].copy(),
            self.ineq_multipliers[a:b].copy(),
        )

    def pinned(self, bc: BoundaryCondition) -> "PrimalDualTrajectory":
        out = self.copy()
        out.states[0] = bc.x_init
        out.costates[-1] = bc.lambda_terminal
        return out

    def max_abs_diff(self, other: "PrimalDualTrajectory", with_inputs: bool = False) -> float:
        diff = max(
            np.max(np.abs(self.states - other.states)),
            np.max(np.abs(self.costates - other.costates)),
        )
        if with_inputs and self.inputs.size:
            diff = max(diff, np.max(np.abs(self.inputs - other.inputs)))
        return float(diff)

    def to_rows(self) -> tuple[list[str], list[list[float]]]:
        """Flat table (one row per stage) for CSV export."""
        nx, nu, ng = self.states.shape[1], self.inputs.shape[1], self.ineq_multipliers.shape[1]
        header = (
            ["i"]
            + [f"x{j}" for j in range(nx)]
            + [f"u{j}" for j in range(nu)]
            + [f"lam{j}" for j in range(nx)]
            + [f"mu{j}" for j in range(ng)]
        )
        rows = []
        for k in range(len(self.states)):
            last = k == len(self.inputs)
            u = [float("nan")] * nu if last else list(self.inputs[k])
            mu = [float("nan")] * ng if last else list(self.ineq_multipliers[k])
            rows.append([self.start + k, *self.states[k], *u, *self.costates[k], *mu])
        return header, rows


@dataclass(frozen=True)
class KktResidual:
    stationarity_x: float
    stationarity_u: float
    primal_feas: float
    ineq_feas: float
    complementarity: float
    dual_feas: float

    def max(self) -> float:
        return max(self.as_dict().values())

    def as_dict(self) -> dict:
        return {
            "stationarity_x": self.stationarity_x,
            "stationarity_u": self.stationarity_u,
            "primal_feas": self.primal_feas,
            "ineq_feas": self.ineq_feas,
            "complementarity": self.complementarity,
            "dual_feas": self.dual_feas,
        }


def _check_traj_dims(problem: OcpProblem, traj: PrimalDualTrajectory, bc: BoundaryCondition):
    n, nx, nu, ng = problem.n_stages, problem.n_x, problem.n_u, problem.n_g
    if traj.start != problem.horizon_start or traj.end != problem.horizon_end:
        raise DimensionError(
            f"trajectory spans {traj.start}..{traj.end}, problem "
            f"{problem.horizon_start}..{problem.horizon_end}"
        )
    checks = [
        ("states", traj.states, (n + 1, nx)),
        ("inputs", traj.inputs, (n, nu)),
        ("costates", traj.costates, (n + 1, nx)),
        ("ineq_multipliers", traj.ineq_multipliers, (n, ng)),
    ]
    for name, arr, shape in checks:
        if arr.shape != shape:
            # first offending stage: the first row index beyond the expected count
            stage = problem.horizon_start + min(arr.shape[0], shape[0])
            raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}", stage)
    if bc.x_init.shape != (nx,):
        raise DimensionError(f"x_init has length {bc.x_init.size}, expected {nx}")


def kkt_residual_from_eval(
    ev: StageEval, traj: PrimalDualTrajectory, bc: BoundaryCondition
) -> KktResidual:
    """KKT defects given an evaluation already performed at ``traj``."""
    X, U, Lam, Mu = traj.states, traj.inputs, traj.costates, traj.ineq_multipliers
    lam_next = Lam[1:]
    rx = ev.lx - Lam[:-1] + np.einsum("kij,ki->kj", ev.fx, lam_next)
    ru = ev.lu + np.einsum("kij,ki->kj", ev.fu, lam_next)
    if Mu.shape[1]:
        rx = rx + np.einsum("kij,ki->kj", ev.gx, Mu)
        ru = ru + np.einsum("kij,ki->kj", ev.gu, Mu)
    stat_x = max(_inf(rx), _inf(Lam[-1] - bc.lambda_terminal))
    stat_u = _inf(ru)
    primal = max(_inf(X[0] - bc.x_init), _inf(X[1:] - ev.f))
    if Mu.shape[1]:
        ineq = float(max(0.0, np.max(ev.g)))
        comp = _inf(Mu * ev.g)
        dual = float(max(0.0, -np.min(Mu)))
    else:
        ineq = comp = dual = 0.0
    return KktResidual(stat_x, stat_u, primal, ineq, comp, dual)


def _inf(a) -> float:
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0


def evaluate_kkt_residual(
    problem: OcpProblem, traj: PrimalDualTrajectory, bc: BoundaryCondition
) -> KktResidual:
    """Maximum stage-wise KKT defects of ``traj`` for ``problem`` with boundary data ``bc``."""
    _check_traj_dims(problem, traj, bc)
    ev = problem.evaluate(traj.states, traj.inputs)
    return kkt_residual_from_eval(ev, traj, bc)


# --------------------------------------------------------------------------- LQ data


@dataclass(frozen=True)
class LqProblemData:
    """Time-invariant LQ data: l = x'Qx - f_lin'x + u'Ru, f = Ax + Bu + c."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    f_lin: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        nx = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(nx, -1)
        nu = B.shape[1]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(nx))
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float).reshape(nx, nx))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(nu, nu))
        object.__setattr__(self, "f_lin", np.asarray(self.f_lin, dtype=float).reshape(nx))
        if A.shape != (nx, nx):
            raise DimensionError(f"A must be square, got {A.shape}")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def validate(self) -> None:
        for name in ("Q", "R"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T, rtol=1e-12, atol=1e-12):
                raise ValidationError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError:
                raise ValidationError(f"{name} is not positive definite") from None
            # Cholesky succeeds on some singular matrices in floating point
            if np.linalg.eigvalsh(mat).min() <= 1e-14 * max(1.0, np.abs(mat).max()):
                raise ValidationError(f"{name} is not positive definite")

    def to_dict(self, M: int | None = None, N: int | None = None) -> dict:
        out = {k: getattr(self, k).tolist() for k in ("A", "B", "c", "Q", "R", "f_lin")}
        if M is not None:
            out["M"] = int(M)
        if N is not None:
            out["N"] = int(N)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "LqProblemData":
        missing = {"A", "B", "c", "Q", "R", "f_lin"} - set(doc)
        if missing:
            raise ValidationError(f"LQ document missing keys {sorted(missing)}")
        return cls(*(np.array(doc[k], dtype=float) for k in ("A", "B", "c", "Q", "R", "f_lin")))


def save_lq_json(path, data: LqProblemData, M: int, N: int) -> None:
    Path(path).write_text(json.dumps(data.to_dict(M, N), indent=2))


def load_lq_json(path) -> tuple[LqProblemData, int, int]:
    doc = json.loads(Path(path).read_text())
    data = LqProblemData.from_dict(doc)
    return data, int(doc.get("M", 1)), int(doc.get("N", 2))


def make_lq_problem(data: LqProblemData, M: int, N: int) -> OcpProblem:
    """Wrap LQ data as an :class:`OcpProblem` with exact derivatives."""
    data.validate()
    A, B, c, Q, R, f_lin = data.A, data.B, data.c, data.Q, data.R, data.f_lin
    nx, nu = data.n_x, data.n_u
    hess = np.zeros((nx + nu, nx + nu))
    hess[:nx, :nx] = 2 * Q
    hess[nx:, nx:] = 2 * R

    def stage_cost(x, u, i):
        return float(x @ Q @ x - f_lin @ x + u @ R @ u), 2 * Q @ x - f_lin, 2 * R @ u

    def dynamics(x, u, i):
        return A @ x + B @ u + c, A, B

    def batch(X, U, stages):
        n = len(stages)
        return StageEval(
            l=np.einsum("ki,ij,kj->k", X, Q, X) - X @ f_lin + np.einsum("ki,ij,kj->k", U, R, U),
            lx=2 * X @ Q - f_lin,
            lu=2 * U @ R,
            f=X @ A.T + U @ B.T + c,
            fx=np.broadcast_to(A, (n, nx, nx)),
            fu=np.broadcast_to(B, (n, nx, nu)),
            g=np.zeros((n, 0)),
            gx=np.zeros((n, 0, nx)),
            gu=np.zeros((n, 0, nu)),
        )

    def lag_hess(X, U, lam_next, mu, stages):
        return np.broadcast_to(hess, (len(stages), nx + nu, nx + nu))

    return OcpProblem(
        horizon_start=M,
        horizon_end=N,
        n_x=nx,
        n_u=nu,
        stage_cost=stage_cost,
        dynamics=dynamics,
        cost_hessian=lambda x, u, i: hess,
        lagrangian_hessian=lag_hess,
        batch_evaluate=batch,
        lq_data=data,
        name="lq",
    )


def random_lq_data(
    rng: np.random.Generator, n_x: int, n_u: int = 1, spectral_radius: float = 1.0
) -> LqProblemData:
    """Random controllable instance with SPD weights (test and CLI generator)."""
    while True:
        A = rng.standard_normal((n_x, n_x))
        rad = max(abs(np.linalg.eigvals(A)))
        A *= spectral_radius / rad if rad > 0 else 1.0
        B = rng.standard_normal((n_x, n_u))
        if controllability_check(A, B)[0]:
            break
    L = rng.standard_normal((n_x, n_x))
    Q = np.eye(n_x) + 0.2 * L @ L.T / n_x
    Lr = rng.standard_normal((n_u, n_u))
    R = np.eye(n_u) * 0.5 + 0.1 * Lr @ Lr.T
    c = 0.1 * rng.standard_normal(n_x)
    f_lin = rng.standard_normal(n_x)
    return LqProblemData(A, B, c, Q, R, f_lin)


def controllability_check(A, B) -> tuple[bool, int]:
    """Rank of ``[B, AB, ..., A^{n-1}B]`` with a scale-invariant tolerance."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionError(f"A must be square, got {A.shape}")
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if B.shape[0] != n:
        raise DimensionError(f"B has {B.shape[0]} rows, expected {n}")
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    C = np.hstack(blocks)
    sv = np.linalg.svd(C, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return False, 0
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    return rank == n, rank


# --------------------------------------------------------------------------- ODE discretization


def discretize_implicit_euler(
    ode_rhs: Callable,
    control_dt: float,
    substeps: int,
    tol: float = 1e-12,
    max_iter: int = 50,
    predictor: Optional[Callable] = None,
) -> Dynamics:
    """Dynamics evaluator integrating ``dx/dt = ode_rhs(x, u)`` by implicit Euler.

    ``ode_rhs(x, u)`` returns ``(F, F_x, F_u)``. The returned evaluator has
    signature ``(x, u, i) -> (x_next, d x_next/dx, d x_next/du)``. Newton starts
    each substep from ``predictor(x, u, h)`` when given, else from ``x``;
    stiff models with several roots of the implicit relation need this.
    """
    if control_dt <= 0:
        raise ValidationError("control_dt must be positive")
    if substeps < 1:
        raise ValidationError("substeps must be >= 1")
    h = control_dt / substeps

    def dynamics(x, u, i=None):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        nx = x.size
        eye = np.eye(nx)
        y = x.copy()
        Jx = eye.copy()
        Ju = np.zeros((nx, u.size))
        for _ in range(substeps):
            prev = y
            if predictor is not None:
                y = np.asarray(predictor(prev, u, h), dtype=float).reshape(nx)
            for _ in range(max_iter):
                F, Fy, Fu = ode_rhs(y, u)
                res = y - prev - h * np.asarray(F)
                if np.max(np.abs(res)) <= tol:
                    break
                y = y - np.linalg.solve(eye - h * np.asarray(Fy), res)
                if not np.all(np.isfinite(y)):
                    raise NewtonError(y, float("inf"), i)
            else:
                F, Fy, Fu = ode_rhs(y, u)
                res = y - prev - h * np.asarray(F)
                if np.max(np.abs(res)) > tol:
                    raise NewtonError(y, float(np.max(np.abs(res))), i)
            M = eye - h * np.asarray(Fy)
            Jx = np.linalg.solve(M, Jx)
            Ju = np.linalg.solve(M, Ju + h * np.asarray(Fu).reshape(nx, -1))
        return y, Jx, Ju

    return dynamics
