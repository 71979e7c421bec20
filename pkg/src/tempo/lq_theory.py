"""Dense verification of the sensitivity certificate for single-input LQ problems.

The horizon-``N`` problem is written as the saddle-point system

    H w + G' nu = zeta,    G w = xi,

with ``w = (x_1, u_1, ..., x_{N-1}, u_{N-1}, x_N)``, ``H`` the true cost
Hessian (``2Q`` and ``2r`` blocks, zero terminal block), ``zeta`` holding
``f_lin`` in the state slots and ``-lam_N`` in the terminal slot, and
``xi = (x_1, c, ..., c)``. The multipliers ``nu`` are the negated costates.
A deadbeat input sequence gives a banded null-space basis ``Z`` of ``G`` and
a right inverse ``Y``; everything else follows from those.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TempoError, UnsupportedError, ValidationError
from .ocp import BoundaryCondition, LqProblemData, controllability_check

DENSE_LIMIT = 5000


def _check_scope(data: LqProblemData) -> None:
    if data.n_u != 1:
        raise UnsupportedError("certificate covers single-input systems only")
    ok, rank = controllability_check(data.A, data.B)
    if not ok:
        raise ValidationError(f"(A, b) is not controllable (rank {rank} < {data.n_x})")


def _stage_hessian(data: LqProblemData) -> np.ndarray:
    nx = data.n_x
    Hs = np.zeros((nx + 1, nx + 1))
    Hs[:nx, :nx] = 2.0 * data.Q
    Hs[nx, nx] = 2.0 * data.R[0, 0]
    return Hs


def deadbeat(data: LqProblemData) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deadbeat sequences.

    Returns
    -------
    xbar : (n_x + 2, n_x)
        ``xbar[0] = 0``, ``xbar[1] = b``, ..., ``xbar[n_x + 1] = 0``.
    ubar : (n_x + 1,)
        ``ubar[0] = 1``.
    Xs : (n_x + 2, n_x, n_x)
        ``Xs[1] = I`` and ``Xs[n_x + 1] = 0``; ``Xs[0]`` is unused (zero).
    Us : (n_x + 1, 1, n_x)
        ``Us[1..n_x]``; ``Us[0]`` is unused.
    """
    _check_scope(data)
    A, b = data.A, data.B[:, 0]
    nx = data.n_x
    ctrb = np.column_stack([np.linalg.matrix_power(A, k) @ b for k in range(nx)])
    Anx = np.linalg.matrix_power(A, nx)
    # coefficient of A^k b in x_{n+1} is ubar_{n-k}
    v = np.linalg.solve(ctrb, -Anx @ b)
    ubar = np.concatenate([[1.0], v[::-1]])
    xbar = np.zeros((nx + 2, nx))
    for i in range(nx + 1):
        xbar[i + 1] = A @ xbar[i] + b * ubar[i]
    V = np.linalg.solve(ctrb, -Anx)
    Us = np.zeros((nx + 1, 1, nx))
    Us[1:] = V[::-1].reshape(nx, 1, nx)
    Xs = np.zeros((nx + 2, nx, nx))
    Xs[1] = np.eye(nx)
    for i in range(1, nx + 1):
        Xs[i + 1] = A @ Xs[i] + np.outer(b, Us[i])
    return xbar, ubar, Xs, Us


def x_slot(i: int, nx: int) -> slice:
    """Location of ``x_i`` (1-based) in ``w``."""
    o = (i - 1) * (nx + 1)
    return slice(o, o + nx)


def u_slot(i: int, nx: int) -> int:
    return (i - 1) * (nx + 1) + nx


def lam_slot(i: int, nx: int) -> slice:
    return slice((i - 1) * nx, i * nx)


@dataclass
class NullSpaceBasis:
    Z: np.ndarray
    Y: np.ndarray
    deadbeat_x: np.ndarray
    deadbeat_u: np.ndarray
    deadbeat_X: np.ndarray
    deadbeat_U: np.ndarray
    N: int
    n_x: int

    def alpha(self, i: int) -> slice:
        return x_slot(i, self.n_x)

    def beta(self, i: int) -> slice:
        return lam_slot(i, self.n_x)


def _guard(N: int, nx: int) -> None:
    if N * nx > DENSE_LIMIT:
        raise ValidationError(f"N * n_x = {N * nx} exceeds the dense limit {DENSE_LIMIT}")


def build_basis(data: LqProblemData, N: int) -> NullSpaceBasis:
    """Banded null-space basis ``Z`` and right inverse ``Y`` of ``G``."""
    _check_scope(data)
    nx = data.n_x
    if N < nx + 2:
        raise ValidationError(f"N must be >= n_x + 2 = {nx + 2}")
    _guard(N, nx)
    xbar, ubar, Xs, Us = deadbeat(data)
    nw = N * nx + N - 1
    Z = np.zeros((nw, N - 1))
    for j in range(1, N):
        # unit input at u_j followed by the deadbeat correction
        Z[u_slot(j, nx), j - 1] = 1.0
        for k in range(1, nx + 1):
            if j + k <= N:
                Z[x_slot(j + k, nx), j - 1] = xbar[k]
            if j + k <= N - 1:
                Z[u_slot(j + k, nx), j - 1] = ubar[k]
    Y = np.zeros((nw, N * nx))
    for j in range(1, N + 1):
        cols = lam_slot(j, nx)
        for k in range(1, nx + 1):
            if j + k - 1 <= N:
                Y[x_slot(j + k - 1, nx), cols] = Xs[k]
            if j + k - 1 <= N - 1:
                Y[u_slot(j + k - 1, nx), cols] = Us[k][0]
    return NullSpaceBasis(Z, Y, xbar[1 : nx + 1], ubar, Xs[1 : nx + 1], Us[1:], N, nx)


@dataclass
class KktSystemDense:
    H: np.ndarray
    G: np.ndarray
    zeta: np.ndarray
    xi: np.ndarray
    N: int
    n_x: int

    def solve(self) -> tuple[np.ndarray, np.ndarray]:
        """Solve the saddle-point system; returns ``(w, costates)`` with costates as (N, n_x)."""
        nw, nc = self.H.shape[0], self.G.shape[0]
        K = np.block([[self.H, self.G.T], [self.G, np.zeros((nc, nc))]])
        sol = np.linalg.solve(K, np.concatenate([self.zeta, self.xi]))
        return sol[:nw], -sol[nw:].reshape(self.N, self.n_x)

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return split_primal(w, self.n_x, self.N)


def split_primal(w: np.ndarray, nx: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    """``w`` to stacked states ``(N, n_x)`` and inputs ``(N - 1, 1)``."""
    X = np.stack([w[x_slot(i, nx)] for i in range(1, N + 1)])
    U = np.array([[w[u_slot(i, nx)]] for i in range(1, N)]).reshape(N - 1, 1)
    return X, U


def build_kkt(data: LqProblemData, N: int, bc: BoundaryCondition) -> KktSystemDense:
    """Dense saddle-point form of the LQ problem on ``N`` stages (any ``n_u = 1``)."""
    nx = data.n_x
    if data.n_u != 1:
        raise UnsupportedError("dense form supports single-input systems only")
    _guard(N, nx)
    nw = N * nx + N - 1
    Hs = _stage_hessian(data)
    H = np.zeros((nw, nw))
    zeta = np.zeros(nw)
    G = np.zeros((N * nx, nw))
    xi = np.zeros(N * nx)
    for i in range(1, N):
        o = (i - 1) * (nx + 1)
        H[o : o + nx + 1, o : o + nx + 1] = Hs
        zeta[x_slot(i, nx)] = data.f_lin
    zeta[x_slot(N, nx)] = -np.asarray(bc.lambda_terminal, dtype=float)
    G[lam_slot(1, nx), x_slot(1, nx)] = np.eye(nx)
    xi[lam_slot(1, nx)] = bc.x_init
    for i in range(2, N + 1):
        rows = lam_slot(i, nx)
        G[rows, x_slot(i, nx)] = np.eye(nx)
        G[rows, x_slot(i - 1, nx)] = -data.A
        G[rows, u_slot(i - 1, nx)] = -data.B[:, 0]
        xi[rows] = data.c
    return KktSystemDense(H, G, zeta, xi, N, nx)


# --------------------------------------------------------------------------- bounds


def _inf_norm(blocks) -> float:
    """max row abs sum of a horizontally stacked block row."""
    return float(np.max(np.sum(np.abs(np.hstack(blocks)), axis=1)))


def bandwidth(mat: np.ndarray, tol: float = 0.0) -> int:
    """Smallest ``B`` with ``mat[i, j] == 0`` whenever ``|i - j| > B``."""
    i, j = np.nonzero(np.abs(mat) > tol)
    return int(np.max(np.abs(i - j))) if i.size else 0


def _sparsity_reach(data: LqProblemData, N: int) -> int:
    """Smallest ``N_s`` with ``Z[alpha(i), j] = 0`` and ``W[beta(i), j] = 0``
    for ``|j - i| >= N_s``, from the structural patterns (no cancellation)."""
    basis = build_basis(data, N)
    nx = data.n_x
    pz = (basis.Z != 0).astype(float)
    py = (basis.Y != 0).astype(float)
    ph = (build_kkt(data, N, BoundaryCondition(np.zeros(nx), np.zeros(nx))).H != 0)
    pw = (py.T @ ph.astype(float) @ pz) > 0
    reach = 0
    for i in range(1, N + 1):
        for j in range(1, N):
            if np.any(pz[x_slot(i, nx), j - 1]) or np.any(pw[lam_slot(i, nx), j - 1]):
                reach = max(reach, abs(j - i) + 1)
    return reach


@dataclass
class TheoryBounds:
    lambda1: float
    lambda2: float
    rho: float
    N_s: int
    L_constants: dict
    H_hat: np.ndarray = field(repr=False)
    eps_scale: float = 0.0

    def epsilon(self, i) -> np.ndarray | float:
        """``eps_i = (L^2 (2 N_s + 1) / lambda1 + 1) rho^(i - 2 N_s - 1)``."""
        i = np.asarray(i, dtype=float)
        return self.eps_scale * self.rho ** (i - 2 * self.N_s - 1)

    def epsilon_prefix(self, n: int = 50) -> np.ndarray:
        return self.epsilon(np.arange(n))

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "rho": self.rho,
            "N_s": self.N_s,
            "L_constants": dict(self.L_constants),
            "epsilon_prefix": [float(e) for e in self.epsilon_prefix(50)],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def compute_bounds(data: LqProblemData) -> TheoryBounds:
    """Uniform constants and the epsilon certificate.

    ``L_Wt`` is the larger of the two transposed-coupling variants
    ``L_Zt L_H L_Yt`` and ``L_Zt L_H L_Y``, so the certificate stays safe
    whichever is intended; both are reported.
    """
    xbar, ubar, Xs, Us = deadbeat(data)
    nx = data.n_x
    Hs = _stage_hessian(data)
    Zhat = np.zeros((nx + 1, nx + 1))
    for k in range(1, nx + 1):
        Zhat[:nx, nx - k] = xbar[k]
        Zhat[nx, nx - k] = ubar[k]
    Zhat[nx, nx] = 1.0
    H_hat = Zhat.T @ Hs @ Zhat
    ev = np.linalg.eigvalsh(H_hat)
    if ev[0] <= 1e-12 * ev[-1]:
        raise TempoError("controllability too weak for certificate")
    lam1 = float(ev[0])

    L_H = float(np.max(np.sum(np.abs(Hs), axis=1)))
    # row sums of the Z band: state rows see xbar_1..xbar_n, input rows 1, ubar_1..ubar_n
    L_Z = max(_inf_norm([xbar[k].reshape(nx, 1) for k in range(1, nx + 1)]),
              float(np.sum(np.abs(ubar))))
    L_Zt = float(np.sum(np.abs(ubar)) + np.sum(np.abs(xbar[1 : nx + 1])))
    L_Y = max(_inf_norm([Xs[k] for k in range(1, nx + 1)]),
              _inf_norm([Us[k] for k in range(1, nx + 1)]))
    L_Yt = float(np.max(sum(np.sum(np.abs(Xs[k]), axis=0) + np.abs(Us[k][0])
                            for k in range(1, nx + 1))))
    L_W = L_Yt * L_H * L_Z
    L_Wt_yt = L_Zt * L_H * L_Yt
    L_Wt_y = L_Zt * L_H * L_Y
    L_Wt = max(L_Wt_yt, L_Wt_y)
    L = max(L_Z, L_Zt, L_W, L_Wt)
    lam2 = L * L * L_H
    rho = (lam2 - lam1) / (lam2 + lam1)

    n_ref = 4 * nx + 8
    N_s = _sparsity_reach(data, n_ref)
    if _sparsity_reach(data, 2 * n_ref) != N_s:
        raise TempoError("sparsity reach depends on the horizon")
    scale = L * L * (2 * N_s + 1) / lam1 + 1.0
    consts = {
        "L_H": L_H, "L_Z": L_Z, "L_Zt": L_Zt, "L_Y": L_Y, "L_Yt": L_Yt,
        "L_W": L_W, "L_Wt": L_Wt, "L_Wt_yt_form": L_Wt_yt, "L_Wt_y_form": L_Wt_y,
        "L": L,
    }
    return TheoryBounds(lam1, lam2, rho, N_s, consts, H_hat, scale)


def reduced_hessian(data: LqProblemData, N: int) -> np.ndarray:
    basis = build_basis(data, N)
    H = build_kkt(data, N, BoundaryCondition(np.zeros(data.n_x), np.zeros(data.n_x))).H
    return basis.Z.T @ H @ basis.Z


# --------------------------------------------------------------------------- decay checks


def inverse_decay_check(
    gamma: np.ndarray, lam_min: float, lam_max: float, band: int | None = None, floor: bool = False
) -> tuple[float, np.ndarray]:
    """Entrywise check of ``|inv(gamma)_ij| <= rho^(|i-j| / B) / lam_min``.

    Returns the largest violation (``<= 0`` means the bound holds) and the
    bound matrix. With ``band = 0`` off-diagonal bounds are zero.
    """
    gamma = np.asarray(gamma, dtype=float)
    if band is None:
        band = bandwidth(gamma)
    rho = (lam_max - lam_min) / (lam_max + lam_min)
    n = gamma.shape[0]
    dist = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
    if band == 0:
        expo = np.where(dist == 0, 0.0, np.inf)
    else:
        expo = dist / band
        if floor:
            expo = np.floor(expo)
    with np.errstate(invalid="ignore"):
        bound = np.where(expo == 0, 1.0, rho ** expo) / lam_min
    inv = np.linalg.inv(gamma)
    return float(np.max(np.abs(inv) - bound)), bound


@dataclass
class DecayReport:
    max_violation: float
    max_violation_floored: float
    band: int
    band_ok: bool
    lambda1: float
    lambda2: float
    N: int

    def to_dict(self) -> dict:
        return {
            "max_violation": self.max_violation,
            "max_violation_floored_exponent": self.max_violation_floored,
            "bandwidth": self.band,
            "bandwidth_ok": self.band_ok,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "N": self.N,
        }


def verify_decay(data: LqProblemData, N: int) -> tuple[float, DecayReport]:
    """Check the banded-inverse decay bound on ``inv(Z' H Z)``."""
    bounds = compute_bounds(data)
    R = reduced_hessian(data, N)
    band = bandwidth(R)
    nx = data.n_x
    viol, _ = inverse_decay_check(R, bounds.lambda1, bounds.lambda2, band=nx)
    viol_f, _ = inverse_decay_check(R, bounds.lambda1, bounds.lambda2, band=nx, floor=True)
    rep = DecayReport(viol, viol_f, band, band <= nx, bounds.lambda1, bounds.lambda2, N)
    return viol, rep


def closed_form_sensitivity(
    data: LqProblemData, N: int, bc_a: BoundaryCondition, bc_b: BoundaryCondition
) -> tuple[np.ndarray, np.ndarray]:
    """Solution difference between two boundary conditions from the basis.

    With ``Hbar = inv(Z'HZ)`` and ``W = Y'HZ``::

        dw  = Z Hbar Z' dzeta + (Y - Z Hbar W') dxi
        dnu = (Y' - W Hbar Z') dzeta + (W Hbar W' - Y'HY) dxi

    Returns ``(w_a - w_b, lam_a - lam_b)``; the costate difference is ``(N, n_x)``.
    """
    basis = build_basis(data, N)
    nx = data.n_x
    H = build_kkt(data, N, bc_a).H
    Z, Y = basis.Z, basis.Y
    dzeta = np.zeros(Z.shape[0])
    dzeta[x_slot(N, nx)] = -(np.asarray(bc_a.lambda_terminal) - np.asarray(bc_b.lambda_terminal))
    dxi = np.zeros(Y.shape[1])
    dxi[lam_slot(1, nx)] = np.asarray(bc_a.x_init) - np.asarray(bc_b.x_init)
    W = Y.T @ H @ Z
    Hbar = np.linalg.inv(Z.T @ H @ Z)
    dw = Z @ (Hbar @ (Z.T @ dzeta)) + Y @ dxi - Z @ (Hbar @ (W.T @ dxi))
    dnu = Y.T @ dzeta - W @ (Hbar @ (Z.T @ dzeta)) + W @ (Hbar @ (W.T @ dxi)) - Y.T @ (H @ (Y @ dxi))
    return dw, -dnu.reshape(N, nx)


def sensitivity_envelope_check(
    data: LqProblemData, N: int, bc_a: BoundaryCondition, bc_b: BoundaryCondition,
    bounds: TheoryBounds | None = None,
) -> float:
    """Largest excess of the per-stage deviations over
    ``eps_{i-1} |dx_1| + eps_{N-i} |dlam_N|`` (``<= 0`` means the envelope holds)."""
    bounds = bounds or compute_bounds(data)
    dw, dlam = closed_form_sensitivity(data, N, bc_a, bc_b)
    dX, _ = split_primal(dw, data.n_x, N)
    dx1 = float(np.max(np.abs(np.asarray(bc_a.x_init) - bc_b.x_init)))
    dlN = float(np.max(np.abs(np.asarray(bc_a.lambda_terminal) - bc_b.lambda_terminal)))
    worst = -math.inf
    for i in range(1, N + 1):
        env = bounds.epsilon(i - 1) * dx1 + bounds.epsilon(N - i) * dlN
        dev = max(np.max(np.abs(dX[i - 1])), np.max(np.abs(dlam[i - 1])))
        worst = max(worst, float(dev - env))
    return worst
