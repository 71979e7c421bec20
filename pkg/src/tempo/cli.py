"""``tempo`` command-line entry point.

Exit codes: 0 on success (including reported non-convergence), 2 for usage
errors, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import TempoError, ValidationError
from .experiments import ExperimentSpec, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

COMMANDS = {
    "solve": "solve",
    "schwarz": "convergence",
    "ads": "sensitivity",
    "certify": "lq_certify",
    "bench": "speedup",
}

HELP = {
    "solve": "monolithic interior-point / Riccati solve",
    "schwarz": "Schwarz convergence study over the overlap list",
    "ads": "boundary-sensitivity probe",
    "certify": "LQ sensitivity certificate and decay checks",
    "bench": "parallel speedup sweep over worker counts",
}


def _omegas(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad overlap list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty overlap list")
    return vals


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--problem", default="cstr", help="'cstr' or a path to an LQ JSON file")
    p.add_argument("--horizon", type=int, default=None, help="number of control steps")
    p.add_argument("--partitions", type=int, default=8, help="number of subdomains K")
    p.add_argument("--overlap", type=_omegas, default=(2, 4, 8), help="omega or omega,omega,...")
    p.add_argument("--rho-reg", type=float, default=0.5)
    p.add_argument("--tol-primal", type=float, default=1e-6)
    p.add_argument("--tol-dual", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=50, help="outer Schwarz iterations")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--samples", type=int, default=30, help="perturbed solves (ads)")
    p.add_argument("--sigma", type=float, default=0.1, help="perturbation scale (ads)")
    p.add_argument("--init", choices=("zero", "coarse"), default="zero",
                   help="Schwarz initial guess")
    p.add_argument("--kkt-tol", type=float, default=1e-8, help="subproblem KKT tolerance")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_common(sub.add_parser(name, help=HELP[name]))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = ExperimentSpec(
            kind=COMMANDS[args.command],
            problem=args.problem,
            horizon=args.horizon,
            partitions=args.partitions,
            omegas=args.overlap,
            rho_reg=args.rho_reg,
            tol_primal=args.tol_primal,
            tol_dual=args.tol_dual,
            max_iter=args.max_iter,
            threads=args.threads,
            seed=args.seed,
            out=args.out,
            n_samples=args.samples,
            sigma=args.sigma,
            init=args.init,
            kkt_tol=args.kkt_tol,
        )
    except ValidationError as exc:
        print(f"tempo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = run_experiment(spec)
    except (TempoError, OSError, ValueError) as exc:
        print(f"tempo: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({k: v for k, v in summary.items() if k not in ("spec", "metadata")},
                     indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
