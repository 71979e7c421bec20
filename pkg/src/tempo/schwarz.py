"""Overlapping Schwarz iteration over the time axis.

Each outer iteration solves every overlapping window with boundary data taken
from the current trajectory, keeps each solution only on its own block and
measures the mismatch at the first discarded stage of every block.
"""

from __future__ import annotations

import csv
import itertools
import math
import multiprocessing
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import SubproblemError, TempoError, ValidationError
from .ocp import BoundaryCondition, KktResidual, OcpProblem, PrimalDualTrajectory
from .subsolver import SolveReport, SolverOptions, solve


@dataclass(frozen=True)
class PartitionSpec:
    K: int
    omega: int
    nonoverlap: tuple
    overlap: tuple

    @property
    def M(self) -> int:
        return self.nonoverlap[0][0]

    @property
    def N(self) -> int:
        return self.nonoverlap[-1][1]


def partition(M: int, N: int, K: int, omega: int) -> PartitionSpec:
    """Split ``M..N`` into ``K`` near-equal blocks, longer blocks first, and
    widen each by ``omega`` stages on both sides (clipped to the horizon)."""
    if K < 1:
        raise ValidationError("K must be >= 1")
    if omega < 0:
        raise ValidationError("omega must be >= 0")
    length = N - M + 1
    if N <= M or K > length:
        raise ValidationError(f"cannot split {length} stages into {K} blocks")
    base, extra = divmod(length, K)
    blocks = []
    lo = M
    for k in range(K):
        hi = lo + base + (1 if k < extra else 0) - 1
        blocks.append((lo, hi))
        lo = hi + 1
    windows = tuple((max(a - omega, M), min(b + omega, N)) for a, b in blocks)
    return PartitionSpec(K, omega, tuple(blocks), windows)


@dataclass(frozen=True)
class SchwarzConfig:
    eps_primal: float = 1e-6
    eps_dual: float = 1e-6
    max_outer_iters: int = 50
    worker_count: int = 1
    record_error_vs_reference: Optional[PrimalDualTrajectory] = None
    solver_options: SolverOptions = field(default_factory=SolverOptions)
    executor: str = "auto"

    def __post_init__(self):
        if self.executor not in ("auto", "thread", "process"):
            raise ValidationError("executor must be 'auto', 'thread' or 'process'")
        if not (self.eps_primal > 0 and self.eps_dual > 0):
            raise ValidationError("tolerances must be positive")
        if self.max_outer_iters < 1:
            raise ValidationError("max_outer_iters must be >= 1")
        if self.worker_count < 1:
            raise ValidationError("worker_count must be >= 1")


@dataclass
class IterationRecord:
    iter: int
    r: float
    s: float
    err_inf: float
    wall_time: float
    reports: list


@dataclass
class IterationLog:
    records: list = field(default_factory=list)
    initial_error: float = math.nan
    reference_norm: float = math.nan
    status: str = "running"

    def __len__(self) -> int:
        return len(self.records)

    @property
    def r(self) -> np.ndarray:
        return np.array([rec.r for rec in self.records])

    @property
    def s(self) -> np.ndarray:
        return np.array([rec.s for rec in self.records])

    @property
    def err_inf(self) -> np.ndarray:
        return np.array([rec.err_inf for rec in self.records])

    def errors_with_initial(self) -> np.ndarray:
        return np.concatenate([[self.initial_error], self.err_inf])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "r", "s", "err_inf", "wall_ms"])
            for rec in self.records:
                w.writerow([rec.iter, repr(rec.r), repr(rec.s), repr(rec.err_inf),
                            f"{1e3 * rec.wall_time:.3f}"])


@dataclass
class BoundaryData:
    """Values a subdomain produced at the first stage past its block."""

    stage: int
    state: np.ndarray
    costate: np.ndarray


def compute_residuals(
    kept: PrimalDualTrajectory,
    discarded_boundary: Sequence[Optional[BoundaryData]],
    problem: OcpProblem | None = None,
) -> tuple[float, float, list]:
    """Primal and dual mismatch at the internal block boundaries.

    ``discarded_boundary[k]`` holds subdomain ``k``'s values at ``N_k + 1``
    (one entry per block, the last one unused). With ``problem`` the per-block
    KKT defect rows of the assembled trajectory are returned as well:
    ``(f_x' dlam, f_u' dlam, dx)`` with ``dlam = lam_{N_k+1} - lam_hat`` and
    ``dx = x_{N_k+1} - x_hat``.
    """
    inner = list(discarded_boundary[:-1])
    if not inner:
        return 0.0, 0.0, []
    if any(b is None for b in inner):
        raise TempoError("missing discarded boundary data (zero overlap?)")
    r = s = 0.0
    rows = []
    for b in inner:
        a = b.stage - kept.start
        dx = kept.states[a] - b.state
        dlam = kept.costates[a] - b.costate
        r = max(r, float(np.max(np.abs(dx))))
        s = max(s, float(np.max(np.abs(dlam))))
        if problem is not None:
            i = b.stage - 1
            sub = problem.restrict(i, i + 1)
            ev = sub.evaluate_stages(kept.states[a - 1 : a], kept.inputs[a - 1 : a])
            rows.append((ev.fx[0].T @ dlam, ev.fu[0].T @ dlam, dx))
    return r, s, rows


def _inf_diff(traj: PrimalDualTrajectory, ref: PrimalDualTrajectory) -> float:
    return float(np.max(np.abs(traj.z - ref.z)))


def schwarz_solve(
    problem: OcpProblem,
    bc: BoundaryCondition,
    part: PartitionSpec,
    cfg: SchwarzConfig,
    initial_guess: PrimalDualTrajectory | None = None,
) -> tuple[PrimalDualTrajectory, IterationLog, bool]:
    """Run the overlapping Schwarz iteration.

    Parameters
    ----------
    problem : OcpProblem
        Full-horizon problem; its window must match ``part``.
    bc : BoundaryCondition
        Boundary data of the full problem, pinned in every iterate.
    part : PartitionSpec
    cfg : SchwarzConfig
    initial_guess : PrimalDualTrajectory, optional
        Defaults to the zero trajectory.

    Returns
    -------
    traj, log, converged

    Raises
    ------
    SubproblemError
        When a window solve fails or does not converge; the exception carries
        the log up to the failed iteration.
    """
    M, N = problem.horizon_start, problem.horizon_end
    if (part.M, part.N) != (M, N):
        raise ValidationError(f"partition spans {part.M}..{part.N}, problem {M}..{N}")
    for a, b in part.overlap:
        if b <= a:
            raise ValidationError(f"window {a}..{b} has no stages; increase omega or reduce K")
    if part.omega == 0 and part.K > 1:
        warnings.warn("omega = 0: subdomains never exchange boundary values", stacklevel=2)
    traj = (initial_guess or PrimalDualTrajectory.zeros(problem)).pinned(bc)
    ref = cfg.record_error_vs_reference
    log = IterationLog()
    if ref is not None:
        log.initial_error = _inf_diff(traj, ref)
        log.reference_norm = float(np.max(np.abs(ref.z)))
    subproblems = [problem.restrict(a, b) for a, b in part.overlap]
    pool, token = _make_pool(cfg, subproblems)
    converged = False
    try:
        for t in range(1, cfg.max_outer_iters + 1):
            t0 = time.perf_counter()
            jobs = []
            for k, (a, b) in enumerate(part.overlap):
                sub_bc = BoundaryCondition(
                    traj.states[a - M].copy(), traj.costates[b - M].copy()
                )
                warm = traj.window(a, b)
                if token is not None:
                    jobs.append(pool.submit(_solve_forked, token, k, sub_bc, warm))
                else:
                    args = (subproblems[k], sub_bc, warm, cfg.solver_options)
                    jobs.append(pool.submit(_solve_window, *args) if pool else args)
            results = [job.result() if pool else _solve_window(*job) for job in jobs]
            new = traj.copy()
            boundary = []
            reports = []
            for k, ((lo, hi), (wa, wb), res) in enumerate(zip(part.nonoverlap, part.overlap, results)):
                sol, report = res
                reports.append(report)
                if isinstance(sol, Exception) or not report.converged:
                    log.status = "subproblem_failed"
                    raise SubproblemError(k, report, log) from (
                        sol if isinstance(sol, Exception) else None
                    )
                _restrict_into(new, sol, lo, hi, wb, M)
                if hi + 1 <= wb:
                    boundary.append(BoundaryData(hi + 1, sol.states[hi + 1 - wa].copy(),
                                                 sol.costates[hi + 1 - wa].copy()))
                else:
                    boundary.append(None)
            traj = new.pinned(bc)
            if part.K == 1:
                r = s = 0.0
            elif any(b is None for b in boundary[:-1]):
                r = s = math.nan
            else:
                r, s, _ = compute_residuals(traj, boundary)
            err = _inf_diff(traj, ref) if ref is not None else math.nan
            log.records.append(
                IterationRecord(t, r, s, err, time.perf_counter() - t0, reports)
            )
            if r < cfg.eps_primal and s < cfg.eps_dual:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
        _FORKED.pop(token, None)
    log.status = "converged" if converged else "not_converged"
    return traj, log, converged


# Window problems hold closures and cannot be pickled; forked workers inherit
# them through this registry instead.
_FORKED: dict = {}
_TOKENS = itertools.count()


def _make_pool(cfg: SchwarzConfig, subproblems):
    if cfg.worker_count == 1:
        return None, None
    kind = cfg.executor
    if kind == "auto":
        forkable = "fork" in multiprocessing.get_all_start_methods()
        kind = "process" if forkable and (os.cpu_count() or 1) > 1 else "thread"
    if kind == "thread":
        return ThreadPoolExecutor(cfg.worker_count), None
    token = next(_TOKENS)
    _FORKED[token] = (subproblems, cfg.solver_options)
    ctx = multiprocessing.get_context("fork")
    return ProcessPoolExecutor(cfg.worker_count, mp_context=ctx), token


def _solve_forked(token, k, bc, warm):
    subproblems, opts = _FORKED[token]
    sol, report = _solve_window(subproblems[k], bc, warm, opts)
    if isinstance(sol, Exception):
        # library exceptions do not all survive pickling
        sol = TempoError(str(sol))
    return sol, report


def _solve_window(problem, bc, warm, opts):
    try:
        return solve(problem, bc, warm, opts)
    except TempoError as exc:
        nan = math.nan
        report = SolveReport(False, 0, KktResidual(nan, nan, nan, nan, nan, nan), 0.0,
                             status=f"error: {exc}")
        return exc, report


def _restrict_into(traj, sol, lo, hi, wb, M):
    """Copy ``sol`` onto block ``lo..hi``; inputs up to ``min(hi, wb - 1)``."""
    a = lo - sol.start
    n = hi - lo + 1
    traj.states[lo - M : hi - M + 1] = sol.states[a : a + n]
    traj.costates[lo - M : hi - M + 1] = sol.costates[a : a + n]
    u_hi = min(hi, wb - 1)
    m = u_hi - lo + 1
    if m > 0:
        traj.inputs[lo - M : lo - M + m] = sol.inputs[a : a + m]
        traj.ineq_multipliers[lo - M : lo - M + m] = sol.ineq_multipliers[a : a + m]


def observed_contraction(log, reference_norm: float | None = None) -> tuple[np.ndarray, float]:
    """Contraction factors ``err(t+1)/err(t)`` and their geometric mean.

    ``log`` is an :class:`IterationLog` with error tracking, or a plain error
    sequence starting at iteration 0. Ratios are used while the earlier error
    stays above ``1e2 * eps * ||z*||``.
    """
    if isinstance(log, IterationLog):
        errs = log.errors_with_initial()
        scale = log.reference_norm if reference_norm is None else reference_norm
    else:
        errs = np.asarray(log, dtype=float)
        scale = 1.0 if reference_norm is None else reference_norm
    if len(errs) < 2 or not np.all(np.isfinite(errs)):
        raise ValidationError("need at least two finite error entries")
    floor = 1e2 * np.finfo(float).eps * max(scale, np.finfo(float).tiny)
    rates = []
    for prev, cur in zip(errs[:-1], errs[1:]):
        if prev <= floor:
            break
        rates.append(cur / prev)
    if not rates:
        raise ValidationError("initial error already at the floating-point floor")
    rates = np.array(rates)
    if np.any(rates == 0):
        return rates, 0.0
    return rates, float(np.exp(np.mean(np.log(rates))))
