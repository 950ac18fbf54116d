"""Command-line front end.

Every subcommand writes CSV files or JSON fit reports. Errors are reported
as a single ``error: <kind>: <message>`` line on stderr and any files
written by the failed command are removed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import dataset as dsmod
from .conditional import estimate_conditional
from .diagnostics import compute_vpc, simulate_from_fit, vpc_frame
from .likelihood import ll_gauss_hermite, ll_importance_sampling, ll_linearized
from .model import ModelConfig, ModelSpec, builtin_model, model_from_config, read_config
from .report import dumps, fit_to_dict, read_report
from .saem import Fit, SaemOptions, run_saem
from .selection import compute_criteria, criteria_from_ll, criteria_table, parameter_counts, stepwise_select
from .simstudy import START_TAGS, run_simstudy, scenario
from .uncertainty import case_bootstrap, conditional_bootstrap

THREADS_ENV = "NLMESAEM_THREADS"


class Artifacts:
    """Files written by one command; removed again if the command fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def path(self, p) -> Path:
        p = Path(p)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def csv(self, df: pd.DataFrame, p) -> Path:
        p = self.path(p)
        df.to_csv(p, index=False, lineterminator="\n")
        return p

    def text(self, s: str, p) -> Path:
        p = self.path(p)
        p.write_text(s, encoding="utf-8")
        return p

    def remove(self):
        for p in self.paths:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _csv_list(text: str | None) -> list[str]:
    return [t for t in (text or "").replace(",", " ").split() if t]


def _float_list(text: str | None) -> list[float] | None:
    vals = _csv_list(text)
    return [float(v) for v in vals] if vals else None


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------

def _config(args) -> ModelConfig:
    return read_config(args.config) if getattr(args, "config", None) else ModelConfig()


def _model(args, cfg: ModelConfig) -> ModelSpec:
    name = args.model or cfg.model
    if name is None:
        raise ValueError("no model given; use --model or a [model] section in --config")
    return model_from_config(cfg, name) if cfg.overrides else builtin_model(name)


def _schema_for(model: ModelSpec | None, cfg: ModelConfig, columns, args) -> tuple[dsmod.Schema, str]:
    d = cfg.data
    outcome = d.get("outcome") or getattr(args, "outcome", None) or (model.outcome if model else None)
    if outcome is None:
        raise ValueError("outcome kind unknown; give --outcome, --model or an outcome in the config")
    group = d.get("group", "id")
    if model is not None:
        default_preds = list(model.predictors)
    else:
        default_preds = ["time", "status", "cens"] if outcome == "tte" else ["time", "y"]
    preds = d.get("predictors") or default_preds
    if outcome == "tte":
        response, cens = d.get("response", "status"), d.get("censoring", "cens")
    else:
        response, cens = d.get("response", preds[-1] if outcome != "gaussian" else "y"), d.get("censoring")
    covs = d.get("covariates")
    if covs is None:
        covs = _csv_list(getattr(args, "covariates", None)) or \
            [c for c in columns if c not in {group, response, cens, *preds}]
    return dsmod.Schema.make(group, preds, response, covs, cens), outcome


def _load_data(args, model: ModelSpec | None, cfg: ModelConfig) -> dsmod.Dataset:
    src = args.data
    impute = _csv_list(",".join(args.impute_median or []))
    if src in dsmod.NAMED_DATASETS and not Path(src).exists():
        return dsmod.load_named(src, impute)
    if not Path(src).exists():
        raise FileNotFoundError(f"data file not found: {src}")
    columns = pd.read_csv(src, nrows=0).columns
    schema, outcome = _schema_for(model, cfg, columns, args)
    return dsmod.load_dataset(src, schema, outcome, impute)


def _options(args, cfg: ModelConfig) -> SaemOptions:
    opts = SaemOptions.from_dict(cfg.options) if cfg.options else SaemOptions()
    kw = {}
    for flag, key in (("seed", "seed"), ("chains", "n_chains"), ("k1", "k1"), ("k2", "k2")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    kw["threads"] = args.threads
    return replace(opts, **kw)


def _likelihood(fit: Fit, method: str, M: int, nodes: int, seed: int | None):
    if method == "none":
        return None
    if method == "is":
        return ll_importance_sampling(fit, M=M, seed=seed)
    if method == "gq":
        return ll_gauss_hermite(fit, nodes=nodes)
    return ll_linearized(fit)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _fit_one(model, data, opts, args, art: Artifacts, prefix: Path):
    fit = run_saem(model, data, opts)
    ll = _likelihood(fit, args.ll, args.M, args.nodes, args.ll_seed)
    crit = compute_criteria(fit, ll) if ll is not None else None
    art.text(dumps(fit_to_dict(fit, likelihood=None if ll is None else ll.to_dict(),
                               criteria=None if crit is None else crit.to_dict())),
             prefix.with_suffix(".json"))
    art.csv(fit.trace_frame(), f"{prefix}_trace.csv")
    if not args.no_individual:
        cond = estimate_conditional(fit, threads=args.threads)
        art.csv(cond.to_frame(fit.data.ids), f"{prefix}_individual.csv")
    return fit, ll, crit


def cmd_fit(args, art: Artifacts) -> int:
    cfg = _config(args)
    opts = _options(args, cfg)
    out = Path(args.out)
    if args.hurdle:
        data = _load_data(args, builtin_model("poisson-lin"), cfg)
        zero_data, pos_data = dsmod.hurdle_split(data)
        name = args.prefix or "hurdle"
        rows, total, pr, pf = [], 0.0, 0, 0
        for part, m, d in (("zero", builtin_model("binary-logistic"), zero_data),
                           ("positive", builtin_model("truncpoisson-lin"), pos_data)):
            fit, ll, crit = _fit_one(m, d, opts, args, art, out / f"{name}_{part}")
            if crit is not None:
                rows.append({"part": part, **crit.to_dict()})
                total += ll.ll
                a, b = parameter_counts(m)
                pr, pf = pr + a, pf + b
        if rows:
            c = criteria_from_ll(total, pr, pf, data.n_subjects, data.n_rows)
            rows.append({"part": "combined", "name": name, "ll": total, "method": rows[0]["method"],
                         "n_params": pr + pf, "n_random": pr, "n_fixed": pf, **c})
            art.csv(pd.DataFrame(rows), out / f"{name}_criteria.csv")
        return 0
    model = _model(args, cfg)
    data = _load_data(args, model, cfg)
    fit, ll, crit = _fit_one(model, data, opts, args, art, out / (args.prefix or model.name))
    est = fit.estimates()
    print(" ".join(f"{k}={v:.6g}" for k, v in est.items()))
    if crit is not None:
        print(f"ll={crit.ll:.4f} aic={crit.aic:.4f} bic={crit.bic:.4f} bicc={crit.bicc:.4f}")
    return 0


def cmd_simulate(args, art: Artifacts) -> int:
    fit, _ = read_report(args.fit)
    sims = simulate_from_fit(fit, nsim=args.nsim, seed=args.seed, omega_scale=args.omega_scale)
    art.csv(sims.to_frame(), args.out)
    return 0


def cmd_vpc(args, art: Artifacts) -> int:
    fit, _ = read_report(args.fit)
    if args.outcome and args.outcome != fit.data.outcome:
        raise ValueError(f"--outcome {args.outcome} does not match the fitted data ({fit.data.outcome})")
    sims = simulate_from_fit(fit, nsim=args.nsim, seed=args.seed)
    bands = compute_vpc(sims, fit.data, args.outcome, args.stratify_by, _float_list(args.breaks),
                        args.statistic)
    art.csv(vpc_frame(bands), args.out)
    return 0


def cmd_bootstrap(args, art: Artifacts) -> int:
    fit, _ = read_report(args.fit)
    kw = dict(B=args.B, seed=args.seed, threads=args.threads, from_estimates=args.from_estimates)
    res = case_bootstrap(fit, **kw) if args.method == "case" else conditional_bootstrap(fit, **kw)
    art.csv(res.summary_frame(), f"{args.out}_summary.csv")
    art.csv(res.replicate_frame(), f"{args.out}_replicates.csv")
    for f in res.flags:
        print(f"warning: {f}", file=sys.stderr)
    return 0


def cmd_stepwise(args, art: Artifacts) -> int:
    fit, _ = read_report(args.fit)
    fit = replace(fit, options=replace(fit.options, threads=1))
    res = stepwise_select(fit, _csv_list(args.covariates), direction=args.direction, M=args.M,
                          ll_seed=args.ll_seed, iiv_moves=not args.no_iiv, threads=args.threads)
    art.csv(res.log_frame(), f"{args.out}_steps.csv")
    ll = ll_importance_sampling(res.fit, M=args.M, seed=args.ll_seed)
    art.text(dumps(fit_to_dict(res.fit, likelihood=ll.to_dict(), criteria=compute_criteria(res.fit, ll).to_dict())),
             f"{args.out}_final.json")
    used = res.model.used_covariates
    print(f"bicc={res.criterion:.4f} covariates={','.join(used) if used else '-'}")
    return 0


def cmd_compare(args, art: Artifacts) -> int:
    reports = []
    for path in args.fit:
        fit, _ = read_report(path)
        ll = _likelihood(fit, args.ll, args.M, args.nodes, args.ll_seed)
        reports.append(compute_criteria(fit, ll, name=Path(path).stem))
    df = criteria_table(reports)
    if args.out:
        art.csv(df, args.out)
    print(df.to_csv(index=False, lineterminator="\n"), end="")
    return 0


def cmd_simstudy(args, art: Artifacts) -> int:
    starts = START_TAGS if args.start == "all" else (args.start,)
    opts = SaemOptions(k1=args.k1, k2=args.k2, n_chains=args.chains)
    metrics, ree = [], []
    for tag in starts:
        sc = scenario(args.scenario, S=args.S, start=tag, options=opts, seed=args.seed)
        res = run_simstudy(sc)
        metrics.append(res.metrics.assign(start=tag, failures=res.failures))
        ree.append(res.ree_frame())
    art.csv(pd.concat(metrics, ignore_index=True), f"{args.out}_metrics.csv")
    art.csv(pd.concat(ree, ignore_index=True), f"{args.out}_estimates.csv")
    return 0


def cmd_explore(args, art: Artifacts) -> int:
    cfg = _config(args)
    model = _model(args, cfg) if (args.model or cfg.model) else None
    data = _load_data(args, model, cfg)
    series = dsmod.summarize_discrete(data, _float_list(args.breaks), args.stratify_by)
    art.csv(dsmod.proportions_to_frame(series), args.out)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _data_args(p):
    p.add_argument("--data", required=True, help="CSV path or a dataset name (lung, toenail, rapi)")
    p.add_argument("--config", help="INI model file with [data], [model] and [options] sections")
    p.add_argument("--model", help="registered model name")
    p.add_argument("--covariates", help="covariate columns when no config is given")
    p.add_argument("--impute-median", action="append", metavar="COL",
                   help="replace missing values of a covariate by its median (repeatable)")


def _ll_args(p, default="is"):
    p.add_argument("--ll", choices=["is", "gq", "lin", "none"], default=default,
                   help="likelihood method")
    p.add_argument("--M", type=int, default=5000, help="importance samples")
    p.add_argument("--nodes", type=int, default=9, help="quadrature nodes per dimension")
    p.add_argument("--ll-seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker threads (default from {THREADS_ENV}, else 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="nlmesaem", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    p = sub.add_parser("fit", help="estimate population parameters")
    _data_args(p)
    p.add_argument("--outcome", choices=dsmod.OUTCOME_KINDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p.add_argument("--hurdle", action="store_true",
                   help="count data: fit the zero part and the positive part separately")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--prefix", help="output file stem (default: model name)")
    p.add_argument("--no-individual", action="store_true", help="skip conditional estimates")
    _ll_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="simulate replicate datasets from a fit report")
    p.add_argument("--fit", required=True)
    p.add_argument("--nsim", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--omega-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("vpc", help="visual predictive check bands")
    p.add_argument("--fit", required=True)
    p.add_argument("--nsim", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--outcome", choices=["binary", "categorical", "count", "tte"])
    p.add_argument("--stratify-by")
    p.add_argument("--breaks", help="count categories, e.g. 0,1,2,5,10")
    p.add_argument("--statistic", choices=["proportion", "median"], default="proportion")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vpc)

    p = sub.add_parser("bootstrap", help="bootstrap standard errors")
    p.add_argument("--fit", required=True)
    p.add_argument("--method", choices=["case", "conditional"], default="case")
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.add_argument("--from-estimates", action="store_true", help="start refits at the estimates")
    p.add_argument("--out", required=True, help="output file stem")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("stepwise", help="stepwise covariate and variability selection by BICc")
    p.add_argument("--fit", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--direction", choices=["forward", "backward", "both"], default="both")
    p.add_argument("--no-iiv", action="store_true", help="only covariate moves")
    p.add_argument("--M", type=int, default=5000)
    p.add_argument("--ll-seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output file stem")
    p.set_defaults(func=cmd_stepwise)

    p = sub.add_parser("compare", help="information criteria of several fit reports")
    p.add_argument("--fit", required=True, nargs="+")
    _ll_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simstudy", help="simulation study on the binary template")
    p.add_argument("--scenario", type=int, choices=[1, 2], default=1)
    p.add_argument("--S", type=int, default=200)
    p.add_argument("--start", choices=[*START_TAGS, "all"], default="true")
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--k1", type=int, default=300)
    p.add_argument("--k2", type=int, default=100)
    p.add_argument("--chains", type=int, default=10)
    p.add_argument("--out", required=True, help="output file stem")
    p.set_defaults(func=cmd_simstudy)

    p = sub.add_parser("explore", help="observed proportions or Kaplan-Meier curves")
    _data_args(p)
    p.add_argument("--outcome", choices=["binary", "categorical", "count", "tte"])
    p.add_argument("--stratify-by")
    p.add_argument("--breaks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explore)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.threads < 1:
        ap.error("--threads must be at least 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    art = Artifacts()
    try:
        return args.func(args, art)
    except KeyboardInterrupt:
        art.remove()
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        art.remove()
        msg = " ".join(str(exc).split()) or "unknown failure"
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
