"""Command-line front end: data ingestion, detection, and study runners.

Exit codes reflect operational success only: 0 when the command ran to
completion (whatever the statistical verdict), 2 on input/parse errors, 3 on
numerical failure.  All randomness flows from ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .covariance import ml_fit
from .efdr import EfdrConfig, efdr_test
from .grid import (
    AggregatedData,
    Grid2D,
    aggregate,
    atomic_write_text,
    observed_data,
    read_grid_csv,
    read_scheme_json,
    restrict_to_observed,
    write_grid_csv,
)
from .harness import (
    NoiseSpec,
    POWER_COLUMNS,
    ROC_COLUMNS,
    ROC_CURVE_COLUMNS,
    SignalSpec,
    TYPE1_COLUMNS,
    gen_field,
    roc_curve_rows,
    run_power_study,
    run_roc_study,
    run_type1_study,
    scheme_for_aggregation,
    write_manifest,
    write_rows_csv,
)
from .pipeline import PipelineConfig, PipelineError, detect

_COV_ALIASES = {
    "white": "white",
    "exp": "exponential",
    "exponential": "exponential",
    "exp-nugget": "exp-nugget",
    "matern": "matern-nugget",
}


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip() != ""]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latsig",
        description="Detect fine-resolution spatial signal in aggregated lattice data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")

    pipe = argparse.ArgumentParser(add_help=False)
    pipe.add_argument("--M", type=int, default=100, help="conditional simulations")
    pipe.add_argument("--J", type=int, default=2, help="wavelet decomposition depth")
    pipe.add_argument("--filter", choices=("la8", "haar"), default="la8")
    pipe.add_argument("--ntests", type=int, default=None,
                      help="wavelet hypotheses given a chance to reject "
                           "(default: all eligible)")
    pipe.add_argument("--alpha", type=float, default=0.05)
    pipe.add_argument("--method", choices=("cpl", "mom", "nve", "fisher"),
                      default="cpl")
    pipe.add_argument("--cov", choices=sorted(_COV_ALIASES), default="exp")
    pipe.add_argument("--sigma", choices=("parametric", "wavelet"),
                      default="parametric",
                      help="conditioning covariance: fitted family or wavelet-diagonal")

    p_detect = sub.add_parser("detect", parents=[common, pipe],
                              help="test one dataset for spatial signal")
    p_detect.add_argument("input", help="grid CSV, or aggregated values with --scheme")
    p_detect.add_argument("--scheme", help="scheme JSON for aggregated input")
    p_detect.add_argument("--agg", help="aggregate a complete grid first: 64, 16, 8, or scheme JSON")

    p_fit = sub.add_parser("fit", parents=[common, pipe],
                           help="fit the covariance family only")
    p_fit.add_argument("input")
    p_fit.add_argument("--scheme")
    p_fit.add_argument("--agg")

    p_sim = sub.add_parser("simulate", parents=[common],
                           help="generate a synthetic signal-plus-noise grid CSV")
    p_sim.add_argument("--r", type=int, default=10)
    p_sim.add_argument("--h", type=float, default=0.0)
    p_sim.add_argument("--phi", type=float, default=5.0)
    p_sim.add_argument("--kappa", type=float, default=0.0)
    p_sim.add_argument("--n1", type=int, default=64)
    p_sim.add_argument("--n2", type=int, default=64)
    p_sim.add_argument("--tau2", type=float, default=1.0)
    p_sim.add_argument("--file", default="field.csv", help="output CSV name")

    p_exp = sub.add_parser("experiment", parents=[common, pipe],
                           help="run a Monte Carlo power or ROC study")
    p_exp.add_argument("id", type=int, choices=(1, 2, 3, 4))
    p_exp.add_argument("--r", type=_int_list, default=[10])
    p_exp.add_argument("--h", type=_float_list, default=[0, 1, 2, 3, 4, 5])
    p_exp.add_argument("--phi", type=_float_list, default=[5.0])
    p_exp.add_argument("--kappa", type=_float_list, default=None)
    p_exp.add_argument("--agg", type=_int_list, default=[64, 16, 8])
    p_exp.add_argument("--replicates", type=int, default=100)
    p_exp.add_argument("--jobs", type=int, default=1)
    p_exp.add_argument("--roc", action="store_true",
                       help="trace ROC curves for the (h, r) pairs instead of power")
    p_exp.add_argument("--quiet", action="store_true")

    p_t1 = sub.add_parser("type1", parents=[common],
                          help="subsampled z-test Type-I study")
    p_t1.add_argument("--N", type=_int_list, default=[80, 85, 90, 95])
    p_t1.add_argument("--alpha", type=_float_list, default=[0.01, 0.05, 0.10])
    p_t1.add_argument("--M", type=int, default=100)
    p_t1.add_argument("--replicates", type=int, default=5000)
    p_t1.add_argument("--mc-samples", type=int, default=100_000)
    p_t1.add_argument("--jobs", type=int, default=1)
    p_t1.add_argument("--quiet", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# input handling


def _load_data(args) -> tuple[AggregatedData | None, Grid2D | None]:
    """(aggregated data, complete grid) — exactly one is set.

    A complete grid with no aggregation requested is returned as a grid (the
    direct single-image test applies); anything aggregated or incomplete
    becomes AggregatedData for the conditional-simulation pipeline.
    """
    if args.scheme:
        scheme = read_scheme_json(args.scheme)
        with open(args.input) as f:
            text = f.read().replace(",", "\n")
        values = np.array([float(x) for x in text.split()])
        return AggregatedData(scheme, values), None

    grid = read_grid_csv(args.input)
    mask = grid.observed_mask()
    complete = bool(mask.all())
    if args.agg:
        if os.path.exists(args.agg):
            scheme = read_scheme_json(args.agg)
        else:
            scheme = scheme_for_aggregation(int(args.agg), grid.n1, grid.n2)
        if not complete:
            scheme = restrict_to_observed(scheme, mask)
        return aggregate(grid, scheme), None
    if not complete:
        return observed_data(grid), None
    return None, grid


def _pipeline_config(args) -> PipelineConfig:
    efdr = EfdrConfig(J=args.J, filter=args.filter, n_tests=args.ntests,
                      alpha=args.alpha, tail="normal")
    return PipelineConfig(
        M=args.M, J=args.J, filter=args.filter,
        cov_kind=_COV_ALIASES[args.cov], method=args.method.upper(),
        alpha=args.alpha, seed=args.seed, sigma=args.sigma, efdr=efdr,
    )


def _write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_detect(args) -> int:
    data, grid = _load_data(args)
    os.makedirs(args.out, exist_ok=True)
    if grid is not None:
        cfg = EfdrConfig(J=args.J, filter=args.filter,
                         n_tests=100 if args.ntests is None else args.ntests,
                         alpha=args.alpha)
        res = efdr_test(grid, cfg)
        report = {
            "p_final": res.p_value,
            "reject": bool(res.p_value < args.alpha),
            "significant": bool(res.p_value < args.alpha),
            "alpha": args.alpha,
            "method": "IDL",
            "M": 1,
            "seed": args.seed,
            "p_values": [res.p_value],
            "grid_shape": [grid.n1, grid.n2],
        }
        mu_hat = res.mu_hat
        p_final, reject = res.p_value, report["reject"]
    else:
        report_obj = detect(data, _pipeline_config(args))
        report = report_obj.to_dict()
        mu_hat = report_obj.mu_hat
        p_final, reject = report_obj.p_final, report_obj.reject
    _write_json(os.path.join(args.out, "report.json"), report)
    write_grid_csv(mu_hat, os.path.join(args.out, "mu_hat.csv"))
    print(f"p={p_final:.6g} reject={str(bool(reject)).lower()}")
    return 0


def _cmd_fit(args) -> int:
    data, grid = _load_data(args)
    if data is None:
        data = observed_data(grid)  # identity scheme over a complete grid
    fit = ml_fit(data, kind=_COV_ALIASES[args.cov], J=args.J, filter=args.filter)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "fitted.json"), fit.to_dict())
    fam = fit.family
    print(
        f"kind={fam.kind} tau2={fam.tau2:.6g}"
        + (f" phi={fam.phi:.6g}" if fam.phi is not None else "")
        + (f" lam={fam.lam:.6g}" if fam.lam is not None else "")
        + f" converged={str(bool(fit.converged)).lower()}"
    )
    return 0


def _cmd_simulate(args) -> int:
    signal = SignalSpec(r=args.r, h=args.h, n1=args.n1, n2=args.n2)
    noise = NoiseSpec(phi=args.phi, kappa=args.kappa, tau2=args.tau2)
    grid = gen_field(signal, noise, args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, args.file)
    write_grid_csv(grid, path)
    print(path)
    return 0


def _cmd_experiment(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    common = dict(
        seed=args.seed, M=args.M, J=args.J, filter=args.filter,
        cov_kind=_COV_ALIASES[args.cov], jobs=args.jobs, quiet=args.quiet,
    )
    if args.roc:
        rh = list(zip(args.h, args.r))
        rows, curves = run_roc_study(
            rh_list=rh, phi=args.phi[0], agg_list=tuple(args.agg),
            replicates=(args.replicates, args.replicates), **common,
        )
        write_rows_csv(rows, ROC_COLUMNS, os.path.join(args.out, f"roc_exp{args.id}.csv"))
        write_rows_csv(roc_curve_rows(curves), ROC_CURVE_COLUMNS,
                       os.path.join(args.out, f"roc_curves_exp{args.id}.csv"))
        write_manifest(
            os.path.join(args.out, f"roc_exp{args.id}_manifest.json"),
            study="roc", experiment=args.id, rh=rh, phi=args.phi[0],
            agg=args.agg, replicates=args.replicates, **common,
        )
    else:
        rows = run_power_study(
            args.id, r_list=tuple(args.r), h_list=tuple(args.h),
            phi_list=tuple(args.phi),
            kappa_list=None if args.kappa is None else tuple(args.kappa),
            agg_list=tuple(args.agg), replicates=args.replicates,
            alpha=args.alpha, **common,
        )
        write_rows_csv(rows, POWER_COLUMNS,
                       os.path.join(args.out, f"power_exp{args.id}.csv"))
        write_manifest(
            os.path.join(args.out, f"power_exp{args.id}_manifest.json"),
            study="power", experiment=args.id, r=args.r, h=args.h,
            phi=args.phi, kappa=args.kappa, agg=args.agg,
            replicates=args.replicates, alpha=args.alpha, **common,
        )
    return 0


def _cmd_type1(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    rows = run_type1_study(
        N_list=tuple(args.N), alpha_list=tuple(args.alpha), M=args.M,
        replicates=args.replicates, seed=args.seed,
        mc_samples=args.mc_samples, jobs=args.jobs, quiet=args.quiet,
    )
    write_rows_csv(rows, TYPE1_COLUMNS, os.path.join(args.out, "type1.csv"))
    write_manifest(
        os.path.join(args.out, "type1_manifest.json"),
        study="type1", N=args.N, alpha=args.alpha, M=args.M,
        replicates=args.replicates, seed=args.seed,
        mc_samples=args.mc_samples,
    )
    return 0


_DISPATCH = {
    "detect": _cmd_detect,
    "fit": _cmd_fit,
    "simulate": _cmd_simulate,
    "experiment": _cmd_experiment,
    "type1": _cmd_type1,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"latsig: input error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, np.linalg.LinAlgError) as exc:
        print(f"latsig: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
