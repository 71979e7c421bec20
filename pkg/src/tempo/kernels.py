"""Hot-kernel dispatch: compiled ``_kernels`` when importable, numpy fallback otherwise.

Set ``TEMPO_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
the backend-equivalence tests).
"""

from __future__ import annotations

import os

import numpy as np

from . import _fallback
from .errors import FactorizationError, NewtonError

_compiled = None
if not os.environ.get("TEMPO_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled
BACKEND = "compiled" if _compiled is not None else "python"


def _impl(backend: str | None):
    return BACKENDS[backend or BACKEND]


def _c(a) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=float)
    # memoryviews in the compiled module need writable buffers
    return arr if arr.flags.writeable else arr.copy()


def riccati_solve(Wxx, Wxu, Wuu, qx, qu, A, B, e, dx0, lam_terminal, reg=0.0,
                  stage_offset=0, backend=None):
    """Solve the stage-structured Newton QP; see ``_fallback.riccati``.

    Raises :class:`FactorizationError` naming the absolute stage where the
    reduced Hessian lost positive definiteness.
    """
    status, dx, du, lam = _impl(backend).riccati(
        _c(Wxx), _c(Wxu), _c(Wuu), _c(qx), _c(qu), _c(A), _c(B), _c(e),
        _c(dx0), _c(lam_terminal), float(reg),
    )
    if status >= 0:
        raise FactorizationError(stage_offset + int(status))
    return dx, du, lam


def cstr_step(X, U, h, substeps, lam=None, tol=1e-12, max_iter=50, stage_offset=0,
              backend=None):
    """Implicit-Euler CSTR transition with Jacobians (and Hessian of lam'f)."""
    X = _c(X)
    status, f, fx, fu, hess = _impl(backend).cstr_step(
        X, _c(np.reshape(U, -1)), float(h), int(substeps),
        None if lam is None else _c(lam), float(tol), int(max_iter),
    )
    if status >= 0:
        raise NewtonError(X[status], float("nan"), stage_offset + int(status))
    return f, fx, fu, hess
