"""Empirical decay of boundary sensitivity.

Perturbs the boundary data ``(x_M, lam_N)``, re-solves, and measures how the
normalized primal-dual deviation falls off with the distance from the nearer
boundary; a log-linear fit gives the empirical decay rate.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import TempoError, ValidationError
from .ocp import BoundaryCondition, OcpProblem, PrimalDualTrajectory
from .subsolver import SolverOptions, solve

_EPS = np.finfo(float).eps


@dataclass
class SensitivitySamples:
    reference: PrimalDualTrajectory
    perturbed: list
    sigma: float
    seed: int
    failures: list = field(default_factory=list)
    solver_tol: float = 0.0

    @property
    def n_failed(self) -> int:
        return len(self.failures)


@dataclass
class AdsReport:
    eps_hat: np.ndarray
    rho_fit: float
    decays: bool
    fit_range: tuple
    r_squared: float
    constant: float
    n_samples: int
    n_failed: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", "eps_hat"])
            for d, e in enumerate(self.eps_hat):
                w.writerow([d, repr(float(e))])

    def summary(self) -> dict:
        return {
            "rho_fit": self.rho_fit,
            "decays": self.decays,
            "fit_range": list(self.fit_range),
            "r_squared": self.r_squared,
            "constant": self.constant,
            "n_samples": self.n_samples,
            "n_failed": self.n_failed,
        }

    def to_json(self, path, extra: dict | None = None) -> None:
        doc = self.summary()
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)


def sample_sensitivity(
    problem: OcpProblem,
    bc: BoundaryCondition,
    n_samples: int,
    sigma: float,
    seed: int,
    solver: Callable | None = None,
    opts: SolverOptions | None = None,
    worker_count: int = 1,
    deltas: Optional[np.ndarray] = None,
) -> SensitivitySamples:
    """Solve the reference problem and ``n_samples`` perturbed copies.

    Sample ``k`` draws ``delta ~ N(0, sigma^2 I)`` on the stacked boundary
    data from ``default_rng([seed, k])``, so results do not depend on the
    scheduling. ``deltas`` overrides the draws. Perturbed solves are warm
    started from the reference.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    solver = solver or solve
    opts = opts or SolverOptions()
    nx = problem.n_x
    ref, rep = solver(problem, bc, None, opts)
    if not rep.converged:
        raise TempoError(f"reference solve failed: {rep.status}")
    if deltas is None:
        deltas = np.stack(
            [sigma * np.random.default_rng([seed, k]).standard_normal(2 * nx)
             for k in range(n_samples)]
        )
    deltas = np.asarray(deltas, dtype=float).reshape(n_samples, 2 * nx)

    def run(k):
        d = deltas[k]
        pert = BoundaryCondition(bc.x_init + d[:nx], bc.lambda_terminal + d[nx:])
        try:
            traj, report = solver(problem, pert, ref, opts)
        except TempoError as exc:
            return k, None, str(exc)
        if not report.converged:
            return k, None, report.status
        return k, traj, None

    if worker_count > 1:
        with ThreadPoolExecutor(worker_count) as pool:
            results = list(pool.map(run, range(n_samples)))
    else:
        results = [run(k) for k in range(n_samples)]
    perturbed, failures = [], []
    for k, traj, err in results:
        if traj is None:
            failures.append((k, err))
        else:
            perturbed.append((deltas[k], traj))
    if len(failures) > 0.5 * n_samples:
        raise TempoError(f"{len(failures)} of {n_samples} perturbed solves failed")
    exact = problem.lq_data is not None and problem.n_g == 0
    return SensitivitySamples(ref, perturbed, sigma, seed, failures,
                              0.0 if exact else opts.kkt_tol)


def _fold(dev: np.ndarray) -> np.ndarray:
    """Max over the two stages at each boundary distance ``d``."""
    n = len(dev) - 1
    out = np.zeros(n // 2 + 1)
    for i, v in enumerate(dev):
        d = min(i, n - i)
        out[d] = max(out[d], v)
    return out


def estimate_epsilon(samples: SensitivitySamples) -> AdsReport:
    """Per-distance worst-case normalized deviation and its geometric fit.

    The fit skips the ``max(2, ceil(0.05 (N - M)))`` entries nearest the
    boundary and stops where the deviation first drops to the noise floor:
    ``1e3 * eps * ||z*||`` plus, for iterative solvers, ten times the solver
    tolerance relative to the smallest perturbation.
    """
    if len(samples.perturbed) < 2:
        raise ValidationError("need at least two successful samples")
    ref = samples.reference
    n = len(ref.states) - 1
    if n < 8:
        raise ValidationError("horizon too short (need N - M >= 8)")
    z_ref = ref.z
    dev = np.zeros(n + 1)
    dmin = math.inf
    for delta, traj in samples.perturbed:
        scale = float(np.max(np.abs(delta)))
        if scale == 0.0:
            continue
        dmin = min(dmin, scale)
        dev = np.maximum(dev, np.max(np.abs(traj.z - z_ref), axis=1) / scale)
    eps_hat = _fold(dev)
    floor = 1e3 * _EPS * float(np.max(np.abs(z_ref)))
    if math.isfinite(dmin):
        floor += 10.0 * samples.solver_tol / dmin
    if not np.any(eps_hat > floor):
        raise TempoError("perturbation too small to resolve")
    d_lo = max(2, math.ceil(0.05 * n))
    d_hi = len(eps_hat) - 1
    below = np.nonzero(eps_hat[d_lo:] < floor)[0]
    if below.size:
        d_hi = d_lo + int(below[0]) - 1
    if d_hi - d_lo < 2:
        # fast decay reaches the floor within the skipped region
        d_lo = max(0, d_hi - 2)
    rho, C, r2 = _loglinear_fit(eps_hat, d_lo, d_hi)
    decays = bool(rho < 1.0 and r2 >= 0.8)
    return AdsReport(eps_hat, rho, decays, (d_lo, d_hi), r2, C,
                     len(samples.perturbed) + samples.n_failed, samples.n_failed)


def _loglinear_fit(eps_hat, d_lo, d_hi) -> tuple[float, float, float]:
    d = np.arange(d_lo, d_hi + 1, dtype=float)
    y = eps_hat[d_lo : d_hi + 1]
    if len(d) < 2 or np.any(y <= 0):
        raise TempoError("fit range has fewer than two positive entries")
    ly = np.log(y)
    slope, intercept = np.polyfit(d, ly, 1)
    pred = intercept + slope * d
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(np.exp(slope)), float(np.exp(intercept)), r2
