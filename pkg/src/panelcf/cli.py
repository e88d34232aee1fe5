"""Command-line front end.

Subcommands: fit, diagnose, placebo, carryover, cv, simulate.
Outputs are machine-first (JSON / CSV); every artifact embeds the resolved
run configuration and seed.  Exit codes: 0 success, 2 input error,
3 numeric failure.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .diagnostics import (
    EquivalenceSpec,
    carryover_test,
    dynamic_effects,
    placebo_test,
    pretrend_test,
    recode_carryover,
    series_to_csv,
)
from .estimators import EstimatorConfig, aggregate_effects, fit as fit_dispatch
from .exceptions import EstimationError, InputError, NotApplicableError, PanelcfError
from .inference import block_bootstrap, default_effect_fn, jackknife
from .panel import load_long_csv, preprocess, relative_time_index
from .simulation import DgpConfig, simulate
from .sweeps import (
    bootstrap_coverage_study,
    factor_crossover_sweep,
    jackknife_qq_study,
    power_sweep,
)
from .tuning import build_cv_folds, select_mc_lambda, select_num_factors

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


@dataclasses.dataclass
class RunConfig:
    """Resolved invocation, embedded in every artifact."""

    subcommand: str
    options: dict

    def to_dict(self):
        def clean(v):
            if isinstance(v, Path):
                return str(v)
            if isinstance(v, (np.integer, np.floating)):
                return v.item()
            return v
        return {"subcommand": self.subcommand,
                "options": {k: clean(v) for k, v in sorted(self.options.items())}}


def _run_config(args):
    opts = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    return RunConfig(subcommand=args.command, options=opts)


def _write_json(path, payload, run_config):
    def default(o):
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            v = float(o)
            return v if np.isfinite(v) else None
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not JSON serializable: {type(o)}")

    payload = dict(payload)
    payload["run_config"] = run_config.to_dict()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=default)


def _csv_header(run_config):
    return "run_config: " + json.dumps(run_config.to_dict(), sort_keys=True)


def _add_data_args(p):
    p.add_argument("--input", required=True, help="long-format CSV")
    p.add_argument("--unit", default="unit")
    p.add_argument("--time", default="time")
    p.add_argument("--outcome", default="outcome")
    p.add_argument("--treatment", default="treatment")
    p.add_argument("--covariates", default="",
                   help="comma-separated covariate columns")


def _add_common_args(p):
    p.add_argument("--outdir", default=".", help="artifact directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("PANELCF_THREADS", "1")))


def _add_estimator_args(p):
    p.add_argument("--method", choices=("fect", "ifect", "mc"), default="fect")
    p.add_argument("--factors", type=int, default=0,
                   help="factor count for ifect")
    p.add_argument("--lambda", dest="shrink", type=float, default=0.0,
                   help="shrinkage for mc")
    p.add_argument("--cv", action="store_true",
                   help="cross-validate factors (ifect) or shrinkage (mc)")
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--carryover-remove", type=int, default=0, metavar="L",
                   help="drop the first L post-exit periods from fitting")


def _add_equiv_args(p):
    p.add_argument("--equiv-alpha", type=float, default=0.05)
    p.add_argument("--equiv-mult", type=float, default=0.36,
                   help="equivalence bound as a multiple of residual sigma")
    p.add_argument("--equiv-range", type=float, default=None,
                   help="absolute equivalence bound (overrides --equiv-mult)")


def _load(args):
    cov = [c for c in args.covariates.split(",") if c]
    column_map = {"unit": args.unit, "time": args.time,
                  "outcome": args.outcome, "treatment": args.treatment,
                  "covariates": cov}
    data = load_long_csv(args.input, column_map)
    if args.__dict__.get("carryover_remove", 0):
        data = recode_carryover(data, args.carryover_remove, mode="remove")
    return data


def _equiv_spec(args):
    if args.equiv_range is not None:
        return EquivalenceSpec(alpha=args.equiv_alpha, mode="absolute",
                               theta1=args.equiv_range, theta2=args.equiv_range)
    return EquivalenceSpec(alpha=args.equiv_alpha, multiplier=args.equiv_mult)


def _estimator_config(args, data):
    cv_result = None
    num_factors = args.factors
    shrink = args.shrink
    base = EstimatorConfig(method=args.method, num_factors=num_factors,
                           shrink_param=shrink, max_iter=args.max_iter,
                           tol=args.tol, seed=args.seed)
    if args.cv:
        if args.method == "fect":
            raise InputError("--cv applies to ifect or mc")
        pdata, info = preprocess(data)
        plan = build_cv_folds(pdata, info, k=args.cv_folds, seed=args.seed)
        if args.method == "ifect":
            cv_result = select_num_factors(pdata, plan, config=base)
            base = base.replace(num_factors=int(cv_result.selected))
        else:
            cv_result = select_mc_lambda(pdata, plan, config=base)
            base = base.replace(shrink_param=float(cv_result.selected))
    return base, cv_result


def cmd_fit(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rc = _run_config(args)
    data = _load(args)
    config, cv_result = _estimator_config(args, data)
    if cv_result is not None:
        _write_json(outdir / "cv.json", cv_result.to_dict(), rc)

    pdata, info = preprocess(data)
    result = fit_dispatch(pdata, config)
    idx = relative_time_index(pdata, info)
    effects = aggregate_effects(result, idx, info)

    summary = None
    if args.inference == "bootstrap":
        summary = block_bootstrap(pdata, config, B=args.B, seed=args.seed,
                                  level=args.level)
    elif args.inference == "jackknife":
        summary = jackknife(pdata, config, level=args.level)

    _write_json(outdir / "fit.json",
                {"fit": result.to_dict(), "effects": effects.to_dict()}, rc)
    rows = dynamic_effects(result, idx, info, resample=summary)
    series_to_csv(rows, outdir / "effects.csv", header_comment=_csv_header(rc))
    if summary is not None:
        _write_json(outdir / "inference.json", summary.to_dict(), rc)
    att_se = "" if summary is None else f" (se {summary.att_se:.4g})"
    print(f"ATT {effects.att:.6g}{att_se}  [method={config.method}, "
          f"r={config.num_factors}, lambda={config.shrink_param:.4g}]")
    return EXIT_OK


def _verdict_row(name, report):
    return (f"{name:<10} dim_p={report.dim_p if report.dim_p is not None else float('nan'):.4f} "
            f"[{report.verdict_dim}]  tost_p={report.tost_p:.4f} "
            f"[{report.verdict_equivalence}]")


def cmd_diagnose(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rc = _run_config(args)
    data = _load(args)
    config, _ = _estimator_config(args, data)
    spec = _equiv_spec(args)

    pdata, info = preprocess(data)
    result = fit_dispatch(pdata, config)
    idx = relative_time_index(pdata, info)
    summary = block_bootstrap(pdata, config, B=args.B, seed=args.seed)
    rows = dynamic_effects(result, idx, info, resample=summary)
    series_to_csv(rows, outdir / "dynamic.csv", header_comment=_csv_header(rc))

    reports = {
        "placebo": placebo_test(pdata, config, S=args.placebo_S, spec=spec,
                                B=args.B, seed=args.seed),
        "pretrend": pretrend_test(pdata, config, spec=spec, B=args.B,
                                  seed=args.seed),
    }
    carryover_note = None
    try:
        reports["carryover"] = carryover_test(pdata, config, l=args.carryover_l,
                                              spec=spec, B=args.B, seed=args.seed)
    except NotApplicableError as exc:
        carryover_note = f"carryover  not applicable: {exc}"

    print(f"dynamic effects: {len(rows)} periods -> {outdir / 'dynamic.csv'}")
    for name, report in reports.items():
        _write_json(outdir / f"{name}.json", report.to_dict(), rc)
        series_to_csv(report.per_period, outdir / f"{name}.csv",
                      header_comment=_csv_header(rc))
        print(_verdict_row(name, report))
    if carryover_note:
        print(carryover_note)
    return EXIT_OK


def cmd_placebo(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rc = _run_config(args)
    data = _load(args)
    config, _ = _estimator_config(args, data)
    report = placebo_test(data, config, S=args.placebo_S, spec=_equiv_spec(args),
                          B=args.B, seed=args.seed)
    _write_json(outdir / "placebo.json", report.to_dict(), rc)
    series_to_csv(report.per_period, outdir / "placebo.csv",
                  header_comment=_csv_header(rc))
    print(_verdict_row("placebo", report))
    return EXIT_OK


def cmd_carryover(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rc = _run_config(args)
    data = _load(args)
    config, _ = _estimator_config(args, data)
    report = carryover_test(data, config, l=args.carryover_l,
                            spec=_equiv_spec(args), B=args.B, seed=args.seed)
    _write_json(outdir / "carryover.json", report.to_dict(), rc)
    series_to_csv(report.per_period, outdir / "carryover.csv",
                  header_comment=_csv_header(rc))
    print(_verdict_row("carryover", report))
    return EXIT_OK


def cmd_cv(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rc = _run_config(args)
    data = _load(args)
    if args.method == "fect":
        raise InputError("cv applies to ifect or mc")
    pdata, info = preprocess(data)
    base = EstimatorConfig(method=args.method, max_iter=args.max_iter,
                           tol=args.tol, seed=args.seed)
    plan = build_cv_folds(pdata, info, k=args.cv_folds, seed=args.seed)
    if args.method == "ifect":
        cv = select_num_factors(pdata, plan, config=base)
    else:
        cv = select_mc_lambda(pdata, plan, config=base)
    _write_json(outdir / "cv.json", cv.to_dict(), rc)
    print(f"{cv.parameter:>12}  mean MSPE")
    for cand, mspe in zip(cv.grid, cv.mean_mspe):
        marker = " <- selected" if cand == cv.selected else ""
        print(f"{cand:>12.6g}  {mspe:.6g}{marker}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rc = _run_config(args)
    if args.sweep:
        return _run_sweep(args, outdir, rc)
    family = args.family.replace("-", "_")
    cfg = DgpConfig(
        family=family, n_units=args.N, n_periods=args.T,
        num_factors=args.r, factor_scale=args.k, seed=args.seed,
        carryover_periods=args.carryover_periods,
    )
    record = simulate(cfg)
    record.export(outdir / "data.csv", outdir / "truth.json")
    print(f"wrote {outdir / 'data.csv'} ({record.data.n_units} units x "
          f"{record.data.n_periods} periods, true ATT {record.att_true:.4g})")
    return EXIT_OK


def _run_sweep(args, outdir, rc):
    header = _csv_header(rc)
    if args.sweep == "factor-crossover":
        df = factor_crossover_sweep(n_sims=args.sims, seed=args.seed,
                                    threads=args.threads)
        summary = df.groupby("r")[["mspe_ifect_true_r", "mspe_ifect_cv",
                                   "mspe_mc_cv"]].mean().reset_index()
    elif args.sweep == "power":
        df = power_sweep(n_sims=args.sims, n_units=args.N, seed=args.seed,
                         threads=args.threads)
        summary = df.groupby("k")[["tost_pass", "f_reject"]].mean().reset_index()
    elif args.sweep == "qq":
        df = jackknife_qq_study(n_sims=args.sims, n_units=args.N,
                                seed=args.seed, threads=args.threads)
        cov = bootstrap_coverage_study(n_sims=min(args.sims, 200),
                                       n_units=args.N, B=200, seed=args.seed,
                                       threads=args.threads)
        cov_path = outdir / "sweep_qq_coverage.csv"
        with open(cov_path, "w") as fh:
            fh.write(f"# {header}\n")
            cov.to_csv(fh, index=False)
        summary = pd.DataFrame([{"coverage": cov["covered"].mean(),
                                 "n_sims": len(df)}])
    else:
        raise InputError(f"unknown sweep {args.sweep!r}")

    raw_path = outdir / f"sweep_{args.sweep}.csv"
    with open(raw_path, "w") as fh:
        fh.write(f"# {header}\n")
        df.to_csv(fh, index=False)
    sum_path = outdir / f"sweep_{args.sweep}_summary.csv"
    with open(sum_path, "w") as fh:
        fh.write(f"# {header}\n")
        summary.to_csv(fh, index=False)
    print(summary.to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panelcf",
        description="Counterfactual estimation and diagnostics for panel data")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="estimate effects and uncertainty")
    _add_data_args(p_fit)
    _add_estimator_args(p_fit)
    _add_common_args(p_fit)
    p_fit.add_argument("--inference", choices=("bootstrap", "jackknife", "none"),
                       default="bootstrap")
    p_fit.add_argument("--B", type=int, default=1000)
    p_fit.add_argument("--level", type=float, default=0.95)
    p_fit.set_defaults(func=cmd_fit)

    p_diag = sub.add_parser("diagnose", help="dynamic effects plus the test battery")
    _add_data_args(p_diag)
    _add_estimator_args(p_diag)
    _add_equiv_args(p_diag)
    _add_common_args(p_diag)
    p_diag.add_argument("--B", type=int, default=200)
    p_diag.add_argument("--placebo-S", type=int, default=3)
    p_diag.add_argument("--carryover-l", type=int, default=3)
    p_diag.set_defaults(func=cmd_diagnose)

    p_plac = sub.add_parser("placebo", help="placebo test only")
    _add_data_args(p_plac)
    _add_estimator_args(p_plac)
    _add_equiv_args(p_plac)
    _add_common_args(p_plac)
    p_plac.add_argument("--B", type=int, default=200)
    p_plac.add_argument("--placebo-S", type=int, default=3)
    p_plac.set_defaults(func=cmd_placebo)

    p_carry = sub.add_parser("carryover", help="no-carryover test only")
    _add_data_args(p_carry)
    _add_estimator_args(p_carry)
    _add_equiv_args(p_carry)
    _add_common_args(p_carry)
    p_carry.add_argument("--B", type=int, default=200)
    p_carry.add_argument("--carryover-l", type=int, default=3)
    p_carry.set_defaults(func=cmd_carryover)

    p_cv = sub.add_parser("cv", help="cross-validate tuning parameters")
    _add_data_args(p_cv)
    _add_estimator_args(p_cv)
    _add_common_args(p_cv)
    p_cv.set_defaults(func=cmd_cv)

    p_sim = sub.add_parser("simulate", help="generate panels or run sweeps")
    p_sim.add_argument("--family",
                       choices=("main", "factor-scaling", "confounder-scale",
                                "staggered-inference"),
                       default="main")
    p_sim.add_argument("--N", type=int, default=200)
    p_sim.add_argument("--T", type=int, default=35)
    p_sim.add_argument("--r", type=int, default=2)
    p_sim.add_argument("--k", type=float, default=1.0)
    p_sim.add_argument("--carryover-periods", type=int, default=0)
    p_sim.add_argument("--sweep", choices=("qq", "factor-crossover", "power"),
                       default=None)
    p_sim.add_argument("--sims", type=int, default=100)
    _add_common_args(p_sim)
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NotApplicableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
