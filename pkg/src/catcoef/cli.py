"""Command-line front end: estimate on CSV data, simulate, invert moments.

Exit codes: 0 on success, 1 on input or usage errors, 2 on identification
failure (a homogeneous slope, where the category probabilities cannot be
estimated).  All outputs are deterministic functions of the input files,
flags and seed; JSON files round-trip every reported number exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import catdist, gmm, mcsim, momsolve
from .core import (
    DegenerateSupportError,
    EstimationError,
    HomogeneityError,
    InfeasibleMomentsError,
    ReducedRankError,
    RegressionSample,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_IDENTIFICATION = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so exit codes stay ours."""

    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="catcoef", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate a categorical-slope model from a CSV file")
    est.add_argument("--input", required=True, help="CSV file with a header row")
    est.add_argument("--outcome", required=True, help="outcome column name")
    est.add_argument("--focal", required=True, help="random-slope regressor column name")
    est.add_argument("--covariates", default="", help="comma-separated covariate columns")
    est.add_argument("--k", type=int, default=2, help="number of slope categories")
    est.add_argument("--s-order", type=int, default=None, dest="s_order",
                     help="highest regressor-moment order (default 2K)")
    est.add_argument("--no-intercept", action="store_true",
                     help="do not prepend an intercept column to the covariates")
    est.add_argument("--seed", type=int, default=0, help="unused; kept for uniform invocation")
    est.add_argument("--out", default=None, help="output JSON path (default stdout)")

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    sim.add_argument("--dgp", default="baseline", choices=mcsim.DGP_KINDS)
    sim.add_argument("--var", default="high", choices=["high", "low"],
                     help="slope-distribution parametrization")
    sim.add_argument("--n", type=int, required=True, help="sample size per replication")
    sim.add_argument("--reps", type=int, required=True, help="number of replications")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--estimator", default="gmm_theta",
                     choices=sorted(mcsim._ESTIMATORS))
    sim.add_argument("--k", type=int, default=None)
    sim.add_argument("--s-order", type=int, default=None, dest="s_order")
    sim.add_argument("--hetero-alpha", type=float, default=0.25, dest="hetero_alpha")
    sim.add_argument("--power-span", type=float, default=None, dest="power_span",
                     help="half-width of a symmetric power grid around the truth")
    sim.add_argument("--power-points", type=int, default=9, dest="power_points")
    sim.add_argument("--out", default="mc_report", help="output path prefix")
    sim.add_argument("--format", default="both", choices=["json", "csv", "both"])

    inv = sub.add_parser("invert-moments", help="invert a moment vector into (pi, b)")
    inv.add_argument("--k", type=int, required=True)
    inv.add_argument("--moments", required=True,
                     help="comma-separated m_1, ..., m_{2K-1}")
    inv.add_argument("--out", default=None, help="output JSON path (default stdout)")
    return parser


def _read_csv(path: str, outcome: str, focal: str, covariates: list):
    wanted = [outcome, focal] + covariates
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise _UsageError(f"cannot read {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise _UsageError(f"{path}: empty file, expected a header row")
        missing = [c for c in wanted if c not in header]
        if missing:
            raise _UsageError(
                f"{path}: missing columns {missing}; available: {header}"
            )
        idx = [header.index(c) for c in wanted]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise _UsageError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                rows.append([float(row[j]) for j in idx])
            except ValueError as exc:
                bad = next(c for j, c in zip(idx, wanted) if not _is_float(row[j]))
                raise _UsageError(
                    f"{path}:{lineno}: non-numeric value in column {bad!r}"
                ) from exc
        if not rows:
            raise _UsageError(f"{path}: no data rows")
    data = np.asarray(rows)
    return data[:, 0], data[:, 1], data[:, 2:]


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _write_json(obj: dict, path: str | None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)


def _ratio_with_se(est: gmm.GmmEstimate):
    """beta_H / beta_L with its delta-method standard error."""
    k = est.theta.k
    b = est.theta.b
    ratio = float(b[-1] / b[0])
    if est.cov is None:
        return ratio, None
    i_lo, i_hi = k, 2 * k - 1  # positions of b_1 and b_K in the parameter vector
    grad = np.array([-b[-1] / b[0] ** 2, 1.0 / b[0]])
    block = est.cov[np.ix_([i_lo, i_hi], [i_lo, i_hi])]
    var = float(grad @ block @ grad)
    return ratio, float(np.sqrt(max(var, 0.0)))


def cmd_estimate(args) -> int:
    covariates = [c for c in args.covariates.split(",") if c]
    y, x, z = _read_csv(args.input, args.outcome, args.focal, covariates)
    if not args.no_intercept:
        z = np.column_stack([np.ones(y.size), z]) if z.size else np.ones((y.size, 1))
    try:
        sample = RegressionSample(y=y, x=x, z=z)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc
    try:
        est = gmm.estimate(sample, args.k, s=args.s_order)
    except (HomogeneityError, DegenerateSupportError) as exc:
        print(f"identification failure: {exc}", file=sys.stderr)
        return EXIT_IDENTIFICATION
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_INPUT

    moments = est.moments
    stage = est.moment_stage
    phi_names = ["E_beta"] + (
        (["alpha"] if not args.no_intercept else [])
        + [f"gamma_{c}" for c in covariates]
    )
    result = {
        "n": sample.n,
        "k": args.k,
        "s": est.stack.s,
        "flags": list(est.flags),
        "objective": est.objective,
        "phi": {
            "names": phi_names,
            "estimate": list(est.phi.phi),
            "se": list(est.phi.se()),
        },
        "moments": {
            "names": stage.param_names(),
            "estimate": list(stage.param_values()),
            "se": list(stage.param_se()),
        },
        "kappa_squared": momsolve.kappa_squared(moments) if moments.m.size >= 2 else None,
        "distribution": {
            "pi": list(est.theta.pi),
            "b": list(est.theta.b),
            "sigma": list(est.sigma),
            "names": est.param_names(),
            "se": list(est.param_se()) if est.cov is not None else None,
        },
    }
    homogeneous = "pi_not_identified" in est.flags
    if homogeneous:
        result["ratio_high_low"] = None
    else:
        ratio, ratio_se = _ratio_with_se(est)
        result["ratio_high_low"] = {"estimate": ratio, "se": ratio_se}
    _write_json(result, args.out)
    return EXIT_IDENTIFICATION if homogeneous else EXIT_OK


def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise _UsageError(f"--reps must be at least 1, got {args.reps}")
    if args.n < 10:
        raise _UsageError(f"--n must be at least 10, got {args.n}")
    spec = mcsim.DgpSpec(
        n=args.n,
        kind=args.dgp,
        parametrization=args.var,
        hetero_alpha=args.hetero_alpha,
    )
    config = mcsim.EstimatorConfig(method=args.estimator, k=args.k, s=args.s_order)
    offsets = None
    if args.power_span is not None:
        if args.power_span <= 0 or args.power_points < 2:
            raise _UsageError("--power-span must be positive with at least 2 points")
        offsets = np.linspace(-args.power_span, args.power_span, args.power_points)
    report = mcsim.run_study(spec, args.reps, config, args.seed, power_offsets=offsets)
    wrote = []
    if args.format in ("json", "both"):
        path = f"{args.out}.json"
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(report.to_json())
        wrote.append(path)
    if args.format in ("csv", "both"):
        path = f"{args.out}.csv"
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(report.to_csv())
        wrote.append(path)
        if offsets is not None:
            path = f"{args.out}_power.csv"
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(report.power_to_csv())
            wrote.append(path)
    print(f"wrote {', '.join(wrote)} ({report.reps_used}/{report.reps} replications used)")
    return EXIT_OK


def cmd_invert_moments(args) -> int:
    try:
        moments = np.array([float(v) for v in args.moments.split(",") if v])
    except ValueError as exc:
        raise _UsageError(f"--moments must be a comma-separated number list: {exc}") from exc
    if moments.size != 2 * args.k - 1:
        raise _UsageError(
            f"--k {args.k} needs exactly 2K-1 = {2 * args.k - 1} moments, got {moments.size}"
        )
    try:
        # closed-form fast path for two categories; its variance guard also
        # turns degenerate (point-mass) moments into the homogeneity message
        theta = (
            catdist.invert_k2(moments) if args.k == 2
            else catdist.invert_general(moments, args.k)
        )
    except (
        HomogeneityError,
        DegenerateSupportError,
        InfeasibleMomentsError,
        ReducedRankError,
    ) as exc:
        print(f"identification failure: {exc}", file=sys.stderr)
        return EXIT_IDENTIFICATION
    except EstimationError as exc:
        print(f"inversion failed: {exc}", file=sys.stderr)
        return EXIT_INPUT
    kappa = moments[0] ** 2 / moments[1] if moments.size >= 2 else None
    _write_json(
        {
            "k": args.k,
            "moments": list(moments),
            "pi": list(theta.pi),
            "b": list(theta.b),
            "kappa_squared": kappa,
        },
        args.out,
    )
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "estimate":
            return cmd_estimate(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_invert_moments(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
