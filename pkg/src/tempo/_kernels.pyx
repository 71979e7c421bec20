# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: stage-wise Riccati factorization and the CSTR transition.

Same signatures and status conventions as ``tempo._fallback``.
"""

import numpy as np
from libc.math cimport exp, fabs, sqrt, isfinite


cdef int _chol(double* a, int n) noexcept nogil:
    # in-place lower Cholesky of row-major a; upper triangle left untouched
    cdef int i, j, k
    cdef double s, t
    for j in range(n):
        s = a[j * n + j]
        for k in range(j):
            s -= a[j * n + k] * a[j * n + k]
        if not (s > 0.0):
            return 1
        s = sqrt(s)
        a[j * n + j] = s
        for i in range(j + 1, n):
            t = a[i * n + j]
            for k in range(j):
                t -= a[i * n + k] * a[j * n + k]
            a[i * n + j] = t / s
    return 0


cdef void _chol_solve(double* L, int n, double* b, int m) noexcept nogil:
    # solves (L L') X = B in place, B row-major n x m
    cdef int i, k, c
    cdef double s
    for c in range(m):
        for i in range(n):
            s = b[i * m + c]
            for k in range(i):
                s -= L[i * n + k] * b[k * m + c]
            b[i * m + c] = s / L[i * n + i]
        for i in range(n - 1, -1, -1):
            s = b[i * m + c]
            for k in range(i + 1, n):
                s -= L[k * n + i] * b[k * m + c]
            b[i * m + c] = s / L[i * n + i]


cdef int _riccati_core(int n, int nx, int nu,
                       double* Wxx, double* Wxu, double* Wuu, double* qx, double* qu,
                       double* A, double* B, double* e, double* dx0, double* lamT, double reg,
                       double* P, double* p, double* K, double* kff,
                       double* dx, double* du, double* lam,
                       double* Pe, double* AtP, double* BtP, double* Qxx, double* Qux,
                       double* Quu, double* gx, double* rhs) noexcept nogil:
    cdef int k, i, j, l
    cdef int nxx = nx * nx, nxu = nx * nu, nuu = nu * nu, m = nx + 1
    cdef double s
    cdef double* Pn
    cdef double* Ak
    cdef double* Bk
    for i in range(nx):
        p[n * nx + i] = lamT[i]
    for k in range(n - 1, -1, -1):
        Pn = P + (k + 1) * nxx
        Ak = A + k * nxx
        Bk = B + k * nxu
        for i in range(nx):
            s = p[(k + 1) * nx + i]
            for j in range(nx):
                s += Pn[i * nx + j] * e[k * nx + j]
            Pe[i] = s
        for i in range(nx):
            for j in range(nx):
                s = 0.0
                for l in range(nx):
                    s += Ak[l * nx + i] * Pn[l * nx + j]
                AtP[i * nx + j] = s
        for i in range(nu):
            for j in range(nx):
                s = 0.0
                for l in range(nx):
                    s += Bk[l * nu + i] * Pn[l * nx + j]
                BtP[i * nx + j] = s
        for i in range(nx):
            for j in range(nx):
                s = Wxx[k * nxx + i * nx + j]
                if i == j:
                    s += reg
                for l in range(nx):
                    s += AtP[i * nx + l] * Ak[l * nx + j]
                Qxx[i * nx + j] = s
        for i in range(nu):
            for j in range(nx):
                s = Wxu[k * nxu + j * nu + i]
                for l in range(nx):
                    s += BtP[i * nx + l] * Ak[l * nx + j]
                Qux[i * nx + j] = s
        for i in range(nu):
            for j in range(nu):
                s = Wuu[k * nuu + i * nu + j]
                if i == j:
                    s += reg
                for l in range(nx):
                    s += BtP[i * nx + l] * Bk[l * nu + j]
                Quu[i * nu + j] = s
        for i in range(nu):
            for j in range(i):
                s = 0.5 * (Quu[i * nu + j] + Quu[j * nu + i])
                Quu[i * nu + j] = s
                Quu[j * nu + i] = s
        for i in range(nx):
            s = qx[k * nx + i]
            for l in range(nx):
                s += Ak[l * nx + i] * Pe[l]
            gx[i] = s
        for i in range(nu):
            for j in range(nx):
                rhs[i * m + j] = Qux[i * nx + j]
            s = qu[k * nu + i]
            for l in range(nx):
                s += Bk[l * nu + i] * Pe[l]
            rhs[i * m + nx] = s
        if _chol(Quu, nu) != 0:
            return k
        _chol_solve(Quu, nu, rhs, m)
        for i in range(nu):
            for j in range(nx):
                K[k * nxu + i * nx + j] = -rhs[i * m + j]
            kff[k * nu + i] = -rhs[i * m + nx]
        for i in range(nx):
            for j in range(nx):
                s = Qxx[i * nx + j]
                for l in range(nu):
                    s += Qux[l * nx + i] * K[k * nxu + l * nx + j]
                P[k * nxx + i * nx + j] = s
        for i in range(nx):
            for j in range(i):
                s = 0.5 * (P[k * nxx + i * nx + j] + P[k * nxx + j * nx + i])
                P[k * nxx + i * nx + j] = s
                P[k * nxx + j * nx + i] = s
        for i in range(nx):
            s = gx[i]
            for l in range(nu):
                s += Qux[l * nx + i] * kff[k * nu + l]
            p[k * nx + i] = s
    for i in range(nx):
        dx[i] = dx0[i]
    for k in range(n):
        for i in range(nu):
            s = kff[k * nu + i]
            for j in range(nx):
                s += K[k * nxu + i * nx + j] * dx[k * nx + j]
            du[k * nu + i] = s
        for i in range(nx):
            s = e[k * nx + i]
            for j in range(nx):
                s += A[k * nxx + i * nx + j] * dx[k * nx + j]
            for j in range(nu):
                s += B[k * nxu + i * nu + j] * du[k * nu + j]
            dx[(k + 1) * nx + i] = s
            s = p[k * nx + i]
            for j in range(nx):
                s += P[k * nxx + i * nx + j] * dx[k * nx + j]
            lam[k * nx + i] = s
    for i in range(nx):
        lam[n * nx + i] = lamT[i]
    return -1


def riccati(double[:, :, ::1] Wxx, double[:, :, ::1] Wxu, double[:, :, ::1] Wuu,
            double[:, ::1] qx, double[:, ::1] qu, double[:, :, ::1] A, double[:, :, ::1] B,
            double[:, ::1] e, double[::1] dx0, double[::1] lam_terminal, double reg):
    cdef int n = qx.shape[0], nx = qx.shape[1], nu = qu.shape[1]
    cdef double[:, :, ::1] P = np.zeros((n + 1, nx, nx))
    cdef double[:, ::1] p = np.zeros((n + 1, nx))
    cdef double[:, :, ::1] K = np.zeros((max(n, 1), nu, nx))
    cdef double[:, ::1] kff = np.zeros((max(n, 1), nu))
    dx_arr = np.empty((n + 1, nx))
    du_arr = np.empty((n, nu))
    lam_arr = np.empty((n + 1, nx))
    cdef double[:, ::1] dx = dx_arr
    cdef double[:, ::1] lam = lam_arr
    cdef double[::1] du = du_arr.reshape(-1) if n * nu > 0 else np.zeros(1)
    cdef double[::1] work = np.zeros(2 * nx + 3 * nx * nx + 2 * nu * nx + nu * nu + nu * (nx + 1) + 1)
    cdef double* w = &work[0]
    cdef int status
    if n == 0:
        dx_arr[0] = np.asarray(dx0)
        lam_arr[0] = np.asarray(lam_terminal)
        return -1, dx_arr, du_arr, lam_arr
    with nogil:
        status = _riccati_core(
            n, nx, nu, &Wxx[0, 0, 0], &Wxu[0, 0, 0], &Wuu[0, 0, 0], &qx[0, 0], &qu[0, 0],
            &A[0, 0, 0], &B[0, 0, 0], &e[0, 0], &dx0[0], &lam_terminal[0], reg,
            &P[0, 0, 0], &p[0, 0], &K[0, 0, 0], &kff[0, 0],
            &dx[0, 0], &du[0], &lam[0, 0],
            w, w + nx, w + nx + nx * nx, w + nx + nx * nx + nu * nx,
            w + nx + 2 * nx * nx + nu * nx, w + nx + 2 * nx * nx + 2 * nu * nx,
            w + nx + 2 * nx * nx + 2 * nu * nx + nu * nu,
            w + 2 * nx + 2 * nx * nx + 2 * nu * nx + nu * nu)
    if status >= 0:
        return status, None, None, None
    return -1, dx_arr, du_arr, lam_arr


# ---------------------------------------------------------------- CSTR model

cdef void _rhs(double* y, double u, double* F, double* Fy, double* kk) noexcept nogil:
    cdef double cA = y[0], cB = y[1], T = y[2]
    cdef double k1 = 1e4 * exp(-1.0 / T)
    cdef double k2 = 400.0 * exp(-0.55 / T)
    cdef double T2 = T * T
    cdef double k1T = k1 / T2
    cdef double k2T = 0.55 * k2 / T2
    F[0] = 1.0 - k1 * cA * cA - k2 * cA - cA
    F[1] = k1 * cA * cA - cB
    F[2] = u - T
    Fy[0] = -2.0 * k1 * cA - k2 - 1.0
    Fy[1] = 0.0
    Fy[2] = -k1T * cA * cA - k2T * cA
    Fy[3] = 2.0 * k1 * cA
    Fy[4] = -1.0
    Fy[5] = k1T * cA * cA
    Fy[6] = 0.0
    Fy[7] = 0.0
    Fy[8] = -1.0
    kk[0] = k1
    kk[1] = k2
    kk[2] = k1T
    kk[3] = k2T


cdef void _predict(double* prev, double u, double h, double* y) noexcept nogil:
    # exact implicit-Euler step: T is linear, c_A solves a quadratic whose
    # positive root is the physical one, c_B is then linear
    cdef double T = (prev[2] + h * u) / (1.0 + h)
    cdef double k1 = 1e4 * exp(-1.0 / T)
    cdef double k2 = 400.0 * exp(-0.55 / T)
    cdef double b = 1.0 + h * (1.0 + k2)
    cdef double c = prev[0] + h
    cdef double cA = 2.0 * c / (b + sqrt(b * b + 4.0 * h * k1 * c))
    y[0] = cA
    y[1] = (prev[1] + h * k1 * cA * cA) / (1.0 + h)
    y[2] = T


cdef void _solve3(double* M, double* b, int m, bint trans) noexcept nogil:
    # Gaussian elimination with partial pivoting on a copy of the 3x3 M (or M')
    cdef double a[9]
    cdef int i, j, c, piv
    cdef double t, best
    for i in range(3):
        for j in range(3):
            a[i * 3 + j] = M[j * 3 + i] if trans else M[i * 3 + j]
    for j in range(3):
        piv = j
        best = fabs(a[j * 3 + j])
        for i in range(j + 1, 3):
            if fabs(a[i * 3 + j]) > best:
                best = fabs(a[i * 3 + j])
                piv = i
        if piv != j:
            for c in range(3):
                t = a[j * 3 + c]; a[j * 3 + c] = a[piv * 3 + c]; a[piv * 3 + c] = t
            for c in range(m):
                t = b[j * m + c]; b[j * m + c] = b[piv * m + c]; b[piv * m + c] = t
        for i in range(j + 1, 3):
            t = a[i * 3 + j] / a[j * 3 + j]
            for c in range(j, 3):
                a[i * 3 + c] -= t * a[j * 3 + c]
            for c in range(m):
                b[i * m + c] -= t * b[j * m + c]
    for j in range(2, -1, -1):
        for c in range(m):
            t = b[j * m + c]
            for i in range(j + 1, 3):
                t -= a[j * 3 + i] * b[i * m + c]
            b[j * m + c] = t / a[j * 3 + j]


cdef int _cstr_core(int n, double* X, double* U, double h, int substeps, double* Lam,
                    double tol, int max_iter, double* f, double* fx, double* fu, double* H,
                    double* ys, double* Ms, double* Js) noexcept nogil:
    cdef int k, j, it, i, a, b, c
    cdef double y[3]
    cdef double prev[3]
    cdef double F[3]
    cdef double Fy[9]
    cdef double kk[4]
    cdef double res[3]
    cdef double J[12]
    cdef double v[3]
    cdef double S[9]
    cdef double Mt[9]
    cdef double u, r, s, cA, T, T3, T4, k1TT, k2TT
    cdef bint ok
    for k in range(n):
        u = U[k]
        for i in range(3):
            y[i] = X[k * 3 + i]
        for i in range(12):
            J[i] = 0.0
        J[0] = 1.0
        J[5] = 1.0
        J[10] = 1.0
        for j in range(substeps):
            for i in range(3):
                prev[i] = y[i]
            _predict(prev, u, h, y)
            ok = False
            for it in range(max_iter + 1):
                _rhs(y, u, F, Fy, kk)
                r = 0.0
                for i in range(3):
                    res[i] = y[i] - prev[i] - h * F[i]
                    if fabs(res[i]) > r:
                        r = fabs(res[i])
                if not isfinite(r):
                    return k
                if r <= tol:
                    ok = True
                    break
                if it == max_iter:
                    break
                for i in range(9):
                    Mt[i] = -h * Fy[i]
                Mt[0] += 1.0
                Mt[4] += 1.0
                Mt[8] += 1.0
                _solve3(Mt, res, 1, False)
                for i in range(3):
                    y[i] -= res[i]
            if not ok:
                return k
            # M at the converged point, stored per substep
            for i in range(9):
                Ms[j * 9 + i] = -h * Fy[i]
            Ms[j * 9 + 0] += 1.0
            Ms[j * 9 + 4] += 1.0
            Ms[j * 9 + 8] += 1.0
            J[11] += h
            _solve3(Ms + j * 9, J, 4, False)
            for i in range(3):
                ys[j * 3 + i] = y[i]
            for i in range(12):
                Js[j * 12 + i] = J[i]
        for i in range(3):
            f[k * 3 + i] = y[i]
            for a in range(3):
                fx[k * 9 + i * 3 + a] = J[i * 4 + a]
            fu[k * 3 + i] = J[i * 4 + 3]
        if H != NULL:
            for i in range(16):
                H[k * 16 + i] = 0.0
            for i in range(3):
                v[i] = Lam[k * 3 + i]
            for j in range(substeps - 1, -1, -1):
                _solve3(Ms + j * 9, v, 1, True)
                _rhs(ys + j * 3, u, F, Fy, kk)
                cA = ys[j * 3]
                T = ys[j * 3 + 2]
                T3 = T * T * T
                T4 = T3 * T
                k1TT = kk[0] * (1.0 / T4 - 2.0 / T3)
                k2TT = kk[1] * (0.3025 / T4 - 1.1 / T3)
                for i in range(9):
                    S[i] = 0.0
                S[0] = -2.0 * kk[0] * v[0] + 2.0 * kk[0] * v[1]
                S[2] = (-2.0 * cA * kk[2] - kk[3]) * v[0] + 2.0 * cA * kk[2] * v[1]
                S[6] = S[2]
                S[8] = (-cA * cA * k1TT - cA * k2TT) * v[0] + cA * cA * k1TT * v[1]
                for a in range(4):
                    for b in range(4):
                        s = 0.0
                        for i in range(3):
                            for c in range(3):
                                s += Js[j * 12 + i * 4 + a] * S[i * 3 + c] * Js[j * 12 + c * 4 + b]
                        H[k * 16 + a * 4 + b] += h * s
    return -1


def cstr_step(double[:, ::1] X, double[::1] U, double h, int substeps, Lam, double tol,
              int max_iter):
    cdef int n = X.shape[0]
    f_arr = np.empty((n, 3))
    fx_arr = np.empty((n, 3, 3))
    fu_arr = np.empty((n, 3, 1))
    cdef double[:, ::1] f = f_arr
    cdef double[:, :, ::1] fx = fx_arr
    cdef double[:, :, ::1] fu = fu_arr
    cdef double[::1] ys = np.empty(3 * substeps)
    cdef double[::1] Ms = np.empty(9 * max(substeps, 1))
    cdef double[::1] Js = np.empty(12 * substeps)
    cdef double[:, ::1] lam
    cdef double[:, :, ::1] H
    cdef double* lam_ptr = NULL
    cdef double* H_ptr = NULL
    hess = None
    if n == 0:
        return -1, f_arr, fx_arr, fu_arr, (None if Lam is None else np.zeros((0, 4, 4)))
    if Lam is not None:
        lam = np.ascontiguousarray(Lam, dtype=float)
        hess = np.empty((n, 4, 4))
        H = hess
        lam_ptr = &lam[0, 0]
        H_ptr = &H[0, 0, 0]
    cdef int status
    with nogil:
        status = _cstr_core(n, &X[0, 0], &U[0], h, substeps, lam_ptr, tol, max_iter,
                            &f[0, 0], &fx[0, 0, 0], &fu[0, 0, 0], H_ptr,
                            &ys[0], &Ms[0], &Js[0])
    if status >= 0:
        return status, None, None, None, None
    return -1, f_arr, fx_arr, fu_arr, hess
