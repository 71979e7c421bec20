"""Pure numpy implementations of the hot kernels.

Signatures mirror the compiled ``_kernels`` module exactly; each returns a
status code first (-1 on success, otherwise the zero-based stage index where
the kernel broke down).
"""

import numpy as np


def riccati(Wxx, Wxu, Wuu, qx, qu, A, B, e, dx0, lam_terminal, reg):
    """Backward Riccati sweep plus forward rollout for the stage-structured QP

        min sum_k 1/2 [dx;du]' W_k [dx;du] + [qx;qu]_k' [dx;du] + lam_terminal' dx_n
        s.t. dx_0 = dx0, dx_{k+1} = A_k dx_k + B_k du_k + e_k

    with ``reg`` added to the diagonal of every stage Hessian. Returns
    ``(status, dx, du, lam)`` where ``lam_k`` is the gradient of the QP
    cost-to-go at ``dx_k``.
    """
    n, nx = qx.shape
    nu = qu.shape[1]
    P = np.zeros((n + 1, nx, nx))
    p = np.zeros((n + 1, nx))
    K = np.zeros((n, nu, nx))
    kff = np.zeros((n, nu))
    p[n] = lam_terminal
    eye_x = np.eye(nx)
    eye_u = np.eye(nu)
    for k in range(n - 1, -1, -1):
        Pn = P[k + 1]
        Ak, Bk = A[k], B[k]
        Pe = Pn @ e[k] + p[k + 1]
        AtP = Ak.T @ Pn
        BtP = Bk.T @ Pn
        Qxx = Wxx[k] + reg * eye_x + AtP @ Ak
        Qux = Wxu[k].T + BtP @ Ak
        Quu = Wuu[k] + reg * eye_u + BtP @ Bk
        gx = qx[k] + Ak.T @ Pe
        gu = qu[k] + Bk.T @ Pe
        try:
            L = np.linalg.cholesky(0.5 * (Quu + Quu.T))
        except np.linalg.LinAlgError:
            return k, None, None, None
        sol = _chol_solve(L, np.column_stack([Qux, gu]))
        K[k] = -sol[:, :nx]
        kff[k] = -sol[:, nx]
        Pk = Qxx + Qux.T @ K[k]
        P[k] = 0.5 * (Pk + Pk.T)
        p[k] = gx + Qux.T @ kff[k]
    dx = np.empty((n + 1, nx))
    du = np.empty((n, nu))
    lam = np.empty((n + 1, nx))
    dx[0] = dx0
    for k in range(n):
        du[k] = K[k] @ dx[k] + kff[k]
        dx[k + 1] = A[k] @ dx[k] + B[k] @ du[k] + e[k]
        lam[k] = P[k] @ dx[k] + p[k]
    lam[n] = lam_terminal
    return -1, dx, du, lam


def _chol_solve(L, rhs):
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


# ---------------------------------------------------------------- CSTR model

def cstr_rhs(y, u):
    """Stacked reactor right-hand side, Jacobian and state second derivatives.

    ``y`` has shape (n, 3) as (c_A, c_B, T); ``u`` shape (n,).
    Returns F (n, 3), F_y (n, 3, 3), F_yy (n, 3, 3, 3) indexed [stage, comp, a, b].
    """
    cA, cB, T = y[:, 0], y[:, 1], y[:, 2]
    k1 = 1e4 * np.exp(-1.0 / T)
    k2 = 400.0 * np.exp(-0.55 / T)
    T2 = T * T
    k1T = k1 / T2
    k2T = 0.55 * k2 / T2
    n = len(T)
    F = np.empty((n, 3))
    F[:, 0] = 1.0 - k1 * cA * cA - k2 * cA - cA
    F[:, 1] = k1 * cA * cA - cB
    F[:, 2] = u - T
    Fy = np.zeros((n, 3, 3))
    Fy[:, 0, 0] = -2.0 * k1 * cA - k2 - 1.0
    Fy[:, 0, 2] = -k1T * cA * cA - k2T * cA
    Fy[:, 1, 0] = 2.0 * k1 * cA
    Fy[:, 1, 1] = -1.0
    Fy[:, 1, 2] = k1T * cA * cA
    Fy[:, 2, 2] = -1.0
    return F, Fy, k1, k2, k1T, k2T


def cstr_second(y, k1, k2, k1T, k2T):
    cA, T = y[:, 0], y[:, 2]
    T3 = T * T * T
    T4 = T3 * T
    k1TT = k1 * (1.0 / T4 - 2.0 / T3)
    k2TT = k2 * (0.3025 / T4 - 1.1 / T3)
    n = len(T)
    Fyy = np.zeros((n, 3, 3, 3))
    Fyy[:, 0, 0, 0] = -2.0 * k1
    Fyy[:, 0, 0, 2] = Fyy[:, 0, 2, 0] = -2.0 * cA * k1T - k2T
    Fyy[:, 0, 2, 2] = -cA * cA * k1TT - cA * k2TT
    Fyy[:, 1, 0, 0] = 2.0 * k1
    Fyy[:, 1, 0, 2] = Fyy[:, 1, 2, 0] = 2.0 * cA * k1T
    Fyy[:, 1, 2, 2] = cA * cA * k1TT
    return Fyy


def cstr_predict(prev, u, h):
    """Exact implicit-Euler substep: T is linear, c_A solves a quadratic whose
    positive root is the physical one, c_B then follows linearly. Newton
    started here converges immediately and never reaches the spurious root."""
    T = (prev[:, 2] + h * u) / (1.0 + h)
    k1 = 1e4 * np.exp(-1.0 / T)
    k2 = 400.0 * np.exp(-0.55 / T)
    b = 1.0 + h * (1.0 + k2)
    c = prev[:, 0] + h
    cA = 2.0 * c / (b + np.sqrt(b * b + 4.0 * h * k1 * c))
    return np.column_stack([cA, (prev[:, 1] + h * k1 * cA * cA) / (1.0 + h), T])


def cstr_step(X, U, h, substeps, Lam, tol, max_iter):
    """Implicit-Euler CSTR transition for all stages at once.

    Returns ``(status, f, fx, fu, hess)``; ``hess`` is the (n, 4, 4) Hessian of
    ``Lam_k' f(x_k, u_k)`` in (x, u) when ``Lam`` is given, else None.
    """
    n = X.shape[0]
    u = np.asarray(U, dtype=float).reshape(n)
    eye = np.eye(3)
    y = np.array(X, dtype=float)
    J = np.zeros((n, 3, 4))
    J[:, :, :3] = eye
    ys, Ms, Js = [], [], []
    for _ in range(substeps):
        prev = y
        y = cstr_predict(prev, u, h)
        active = np.ones(n, dtype=bool)
        for _ in range(max_iter):
            F, Fy = cstr_rhs(y, u)[:2]
            res = y - prev - h * F
            active = np.max(np.abs(res), axis=1) > tol
            if not active.any():
                break
            step = np.linalg.solve(eye - h * Fy[active], res[active][..., None])[..., 0]
            y[active] -= step
            if not np.all(np.isfinite(y)):
                bad = np.nonzero(~np.isfinite(y).all(axis=1))[0][0]
                return int(bad), None, None, None, None
        else:
            F, Fy = cstr_rhs(y, u)[:2]
            res = np.max(np.abs(y - prev - h * F), axis=1)
            if np.any(res > tol):
                return int(np.nonzero(res > tol)[0][0]), None, None, None, None
        M = eye - h * Fy
        rhs = J.copy()
        rhs[:, 2, 3] += h  # h * F_u, F_u = (0, 0, 1)
        J = np.linalg.solve(M, rhs)
        ys.append(y.copy())
        Ms.append(M)
        Js.append(J)
    f = y
    fx = J[:, :, :3].copy()
    fu = J[:, :, 3:].copy()
    hess = None
    if Lam is not None:
        hess = np.zeros((n, 4, 4))
        a = np.array(Lam, dtype=float)
        for j in range(substeps - 1, -1, -1):
            v = np.linalg.solve(np.transpose(Ms[j], (0, 2, 1)), a[..., None])[..., 0]
            _, _, k1, k2, k1T, k2T = cstr_rhs(ys[j], u)
            Fyy = cstr_second(ys[j], k1, k2, k1T, k2T)
            S = np.einsum("kc,kcab->kab", v, Fyy)
            hess += h * np.einsum("kai,kab,kbj->kij", Js[j], S, Js[j])
            a = v
    return -1, f, fx, fu, hess
