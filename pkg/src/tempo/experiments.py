"""Experiment drivers behind the command-line interface.

Each experiment writes plain CSV tables plus a JSON summary that records every
setting used, so an output directory describes itself.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ads, cstr, lq_theory
from .errors import SubproblemError, TempoError, ValidationError
from .ocp import BoundaryCondition, OcpProblem, PrimalDualTrajectory, load_lq_json, make_lq_problem
from .schwarz import SchwarzConfig, observed_contraction, partition, schwarz_solve
from .subsolver import SolverOptions, solve

log = logging.getLogger(__name__)

KINDS = ("sensitivity", "convergence", "speedup", "lq_certify", "solve")
INITS = ("zero", "coarse")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    problem: str = "cstr"
    horizon: int | None = None
    partitions: int = 8
    omegas: tuple = (2, 4, 8)
    rho_reg: float = 0.5
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    max_iter: int = 50
    threads: int = 1
    seed: int = 0
    out: str = "out"
    n_samples: int = 30
    sigma: float = 0.1
    init: str = "zero"
    kkt_tol: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown experiment kind {self.kind!r}")
        if self.init not in INITS:
            raise ValidationError(f"init must be one of {INITS}")
        if self.partitions < 1:
            raise ValidationError("partitions must be >= 1")
        if not self.omegas or any(w < 0 for w in self.omegas):
            raise ValidationError("overlap list must be non-empty and nonnegative")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if self.horizon is not None and self.horizon < 2:
            raise ValidationError("horizon must be >= 2")
        if self.kind == "lq_certify" and self.problem == "cstr":
            raise ValidationError("lq_certify needs an LQ problem file")
        if self.kind == "sensitivity" and not (self.sigma > 0 and self.n_samples >= 1):
            raise ValidationError("sensitivity needs sigma > 0 and at least one sample")

    @property
    def is_cstr(self) -> bool:
        return self.problem == "cstr"

    def solver_options(self) -> SolverOptions:
        return SolverOptions(kkt_tol=self.kkt_tol)


@dataclass
class LoadedProblem:
    problem: OcpProblem
    bc: BoundaryCondition
    metadata: dict = field(default_factory=dict)
    cfg: cstr.CstrConfig | None = None
    lq: tuple | None = None


def load_problem(spec: ExperimentSpec) -> LoadedProblem:
    """Build the problem named by ``spec``: the CSTR benchmark or an LQ JSON file."""
    if spec.is_cstr:
        cfg = cstr.CstrConfig(rho_reg=spec.rho_reg, horizon_N=spec.horizon or 180).resolved()
        return LoadedProblem(cstr.build_cstr_problem(cfg), cstr.default_boundary(cfg),
                             {"problem": "cstr", **cfg.metadata()}, cfg=cfg)
    path = Path(spec.problem)
    data, M, N = load_lq_json(path)
    if spec.horizon is not None:
        N = M + spec.horizon
    doc = json.loads(path.read_text())
    nx = data.n_x
    bc = BoundaryCondition(np.asarray(doc.get("x_init", np.zeros(nx)), dtype=float),
                           np.asarray(doc.get("lambda_terminal", np.zeros(nx)), dtype=float))
    meta = {"problem": str(path), "M": M, "N": N, "n_x": nx, "n_u": data.n_u}
    return LoadedProblem(make_lq_problem(data, M, N), bc, meta, lq=(data, M, N))


def initial_guess(spec: ExperimentSpec, lp: LoadedProblem) -> PrimalDualTrajectory:
    if spec.init == "coarse":
        traj, rep = solve(lp.problem, lp.bc, None, SolverOptions(kkt_tol=1e-2))
        log.info("coarse initial solve: %s after %d iterations", rep.status, rep.iterations)
        return traj
    if lp.cfg is not None:
        return cstr.hold_guess(lp.problem, lp.bc, lp.cfg.u_s)
    return PrimalDualTrajectory.zeros(lp.problem)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, default=_json_default))


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_traj(path: Path, traj: PrimalDualTrajectory) -> None:
    header, rows = traj.to_rows()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def reference_solve(lp: LoadedProblem, tol: float = 1e-10) -> PrimalDualTrajectory:
    traj, rep = solve(lp.problem, lp.bc, None, SolverOptions(kkt_tol=tol, max_newton_iters=200))
    if not rep.converged:
        raise TempoError(f"monolithic reference solve failed: {rep.status}")
    return traj


def run_experiment(spec: ExperimentSpec) -> dict:
    """Run one experiment and write its outputs under ``spec.out``.

    Non-convergence is reported in the outputs; only setup, solver and I/O
    failures raise.
    """
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    lp = load_problem(spec)
    runner = {
        "sensitivity": _run_sensitivity,
        "convergence": _run_convergence,
        "speedup": _run_speedup,
        "lq_certify": _run_certify,
        "solve": _run_solve,
    }[spec.kind]
    summary = runner(spec, lp, out)
    summary["spec"] = asdict(spec)
    summary["metadata"] = lp.metadata
    _write_json(out / "summary.json", summary)
    return summary


def _run_solve(spec, lp, out):
    traj, rep = solve(lp.problem, lp.bc, None, spec.solver_options())
    _write_traj(out / "trajectory.csv", traj)
    doc = rep.to_dict()
    _write_json(out / "report.json", {**doc, "metadata": lp.metadata})
    return {"status": rep.status, "converged": rep.converged}


def _run_sensitivity(spec, lp, out):
    samples = ads.sample_sensitivity(
        lp.problem, lp.bc, spec.n_samples, spec.sigma, spec.seed,
        opts=spec.solver_options(), worker_count=spec.threads,
    )
    report = ads.estimate_epsilon(samples)
    report.to_csv(out / "eps.csv")
    report.to_json(out / "report.json", {
        "failures": [{"sample": k, "status": s} for k, s in samples.failures],
        "sigma": spec.sigma, "seed": spec.seed, "metadata": lp.metadata,
    })
    sdir = out / "samples"
    sdir.mkdir(exist_ok=True)
    _write_traj(sdir / "reference.csv", samples.reference)
    for k, (_, traj) in enumerate(samples.perturbed):
        _write_traj(sdir / f"sample_{k:03d}.csv", traj)
    return {"status": "reported", **report.summary()}


def _run_convergence(spec, lp, out):
    ref = reference_solve(lp)
    guess = initial_guess(spec, lp)
    M, N = lp.problem.horizon_start, lp.problem.horizon_end
    runs = {}
    for omega in spec.omegas:
        cfg = SchwarzConfig(spec.tol_primal, spec.tol_dual, spec.max_iter, spec.threads,
                            record_error_vs_reference=ref, solver_options=spec.solver_options())
        part = partition(M, N, spec.partitions, omega)
        try:
            traj, it_log, converged = schwarz_solve(lp.problem, lp.bc, part, cfg, guess)
            status = it_log.status
            final = float(traj.max_abs_diff(ref, with_inputs=True))
        except SubproblemError as exc:
            it_log, converged, status, final = exc.log, False, f"subproblem_failed: {exc}", None
        it_log.to_csv(out / f"residuals_omega{omega}.csv")
        entry = {"status": status, "converged": converged, "iterations": len(it_log),
                 "final_error": final}
        try:
            entry["rate"] = observed_contraction(it_log)[1]
        except ValidationError:
            entry["rate"] = None
        runs[str(omega)] = entry
        log.info("omega=%d: %s after %d iterations", omega, status, len(it_log))
    return {"status": "reported", "runs": runs}


def _worker_counts(threads: int) -> list[int]:
    counts, w = [], 1
    while w < threads:
        counts.append(w)
        w *= 2
    counts.append(threads)
    return counts


def _run_speedup(spec, lp, out):
    omega = spec.omegas[0]
    t0 = time.perf_counter()
    ref = reference_solve(lp, spec.kkt_tol)
    base = time.perf_counter() - t0
    guess = initial_guess(spec, lp)
    part = partition(lp.problem.horizon_start, lp.problem.horizon_end, spec.partitions, omega)
    rows, runs = [(0, base)], {}
    for w in _worker_counts(spec.threads):
        cfg = SchwarzConfig(spec.tol_primal, spec.tol_dual, spec.max_iter, w,
                            solver_options=spec.solver_options())
        t0 = time.perf_counter()
        traj, it_log, converged = schwarz_solve(lp.problem, lp.bc, part, cfg, guess)
        rows.append((w, time.perf_counter() - t0))
        runs[str(w)] = {"converged": converged, "iterations": len(it_log),
                        "error_vs_monolithic": traj.max_abs_diff(ref, with_inputs=True)}
    with open(out / "timing.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["workers", "wall_ms"])
        for w, t in rows:
            wr.writerow([w, f"{1e3 * t:.3f}"])
    return {"status": "reported", "omega": omega, "monolithic_ms": 1e3 * base, "runs": runs,
            "note": "workers = 0 is the monolithic baseline"}


def _run_certify(spec, lp, out):
    data, M, N = lp.lq
    bounds = lq_theory.compute_bounds(data)
    bounds.to_json(out / "bounds.json")
    n_dec = min(N - M + 1, lq_theory.DENSE_LIMIT // data.n_x)
    viol, rep = lq_theory.verify_decay(data, n_dec)
    rng = np.random.default_rng(spec.seed)
    nx = data.n_x
    bc_b = BoundaryCondition(lp.bc.x_init + rng.standard_normal(nx),
                             lp.bc.lambda_terminal + rng.standard_normal(nx))
    env = lq_theory.sensitivity_envelope_check(data, n_dec, lp.bc, bc_b, bounds)
    spectra = {}
    for n in (10, 20, 40):
        if n >= nx + 2:
            ev = np.linalg.eigvalsh(lq_theory.reduced_hessian(data, n))
            spectra[str(n)] = [float(ev[0]), float(ev[-1])]
    doc = {**rep.to_dict(), "envelope_max_violation": env, "reduced_spectrum": spectra}
    _write_json(out / "decay_check.json", doc)
    return {"status": "reported", "max_violation": viol, "envelope_max_violation": env}
