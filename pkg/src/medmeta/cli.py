"""Command-line interface: ``medmeta <subcommand> ...``.

Every subcommand writes one JSON report (``--out``). Subcommands that run
a univariate meta-analysis also write a forest table (``--forest``,
default: the report path with suffix ``.forest.csv``).

Exit codes: 0 success, 1 invalid input, 2 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import datetime
import json
import math
import secrets
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .core import MetaResult
from .errors import ConvergenceError, MedMetaError, ValidationError
from .io import (
    file_digest,
    read_aggregate_csv,
    read_correlation_csv,
    read_ipd_csv,
    write_aggregate_csv,
    write_correlation_csv,
    write_forest_csv,
    write_ipd_csv,
)
from .ipd_transport import DECLARED_ASSUMPTIONS, population_specific_meta, standardized_nie
from .masem import correlation_based_masem, parameter_based_masem, path_product_gap
from .meta_engines import Z975
from .ml_pathway import SIGMA_NOTE, bootstrap_ci, delta_estimate, fit_bivariate_re
from .simlab import DGPConfig, appendix1_scenario, generate_aggregates, generate_study
from .within_study import fit_working_models, product_of_coefficients, standardized_indirect
from .xm_integration import ESTIMANDS, MEDIATOR_CONFOUNDING_ASSUMPTION, hybrid_nie, summarize_eta

SCHEMA_VERSION = 1


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors (exit 1); 2 is reserved for non-convergence
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _resolve_seed(args: argparse.Namespace) -> int:
    if args.seed is None:
        args.seed = secrets.randbelow(2 ** 31)
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def _effective_config(args: argparse.Namespace) -> dict:
    skip = {"func", "timestamp", "out", "forest"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _inputs(paths: Sequence[tuple[str, str]], **extra: Any) -> dict:
    return {"files": [{"role": role, "path": str(p), "sha256": file_digest(p)} for role, p in paths],
            **extra}


def _report(args: argparse.Namespace, approach: str, inputs: dict, results: dict,
            diagnostics: dict | None = None, seed: int | None = None) -> dict:
    stamp = None
    if args.timestamp:
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return {
        "schema_version": SCHEMA_VERSION,
        "approach": approach,
        "config": _effective_config(args),
        "inputs": inputs,
        "results": results,
        "diagnostics": diagnostics or {},
        "provenance": {"command": args.command, "seed": seed, "version": __version__,
                       "timestamp": stamp},
    }


def _forest_path(args: argparse.Namespace) -> Path:
    if args.forest:
        return Path(args.forest)
    out = Path(args.out)
    return out.with_name(out.stem + ".forest.csv")


def _emit(args: argparse.Namespace, report: dict, meta: MetaResult | None = None) -> None:
    Path(args.out).write_text(dumps_report(report), encoding="utf-8")
    if meta is not None:
        write_forest_csv(_forest_path(args), meta, Z975)


def cmd_masem_param(args):
    records = read_aggregate_csv(args.inp)
    meta = parameter_based_masem(records, method=args.method)
    results = {"meta": meta.to_dict(), "path_product_gap": path_product_gap(records, args.method)}
    inputs = _inputs([("aggregates", args.inp)], k=len(records),
                     n_total=sum(r.n for r in records))
    _emit(args, _report(args, "parameter-based MASEM", inputs, results), meta)


def cmd_masem_corr(args):
    records = read_correlation_csv(args.inp)
    fit = correlation_based_masem(records, method=args.wls)
    results = {"structural_fit": fit.to_dict(), "pooled_correlations": fit.pooled.to_dict()}
    diagnostics = {"stage1_converged": fit.pooled.converged,
                   "correlation_scale": "raw (no Fisher z transform)"}
    inputs = _inputs([("correlations", args.inp)], k=len(records),
                     n_total=sum(r.n for r in records))
    _emit(args, _report(args, "correlation-based MASEM", inputs, results, diagnostics))


def cmd_ml(args):
    seed = _resolve_seed(args)
    records = read_aggregate_csv(args.inp)
    fit = fit_bivariate_re(records, method=args.method)
    delta, se = delta_estimate(fit)
    boot = bootstrap_ci(fit, records, b=args.bootstrap, seed=seed)
    results = {"fit": fit.to_dict(), "delta": delta, "se_delta": se,
               "bootstrap_ci": boot.to_dict()}
    diagnostics = {"converged": fit.converged, "bootstrap_failures": boot.n_failed,
                   "interval_contains_estimate": boot.contains_estimate,
                   "sigma_interpretation": SIGMA_NOTE}
    inputs = _inputs([("aggregates", args.inp)], k=len(records),
                     n_total=sum(r.n for r in records))
    _emit(args, _report(args, "marginal likelihood (bivariate paths)", inputs, results,
                        diagnostics, seed))


def cmd_ipd_transport(args):
    seed = _resolve_seed(args)
    target = read_ipd_csv(args.target)
    sources = [read_ipd_csv(p) for p in args.source]
    ids = [s.study_id for s in sources]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"source study ids (file stems) must be distinct: {ids}")
    estimates, entries = [], []
    for src in sources:
        est = standardized_nie(src, target, x=args.x, x_star=args.xstar,
                               interaction=args.interaction, xl_interaction=args.xl_interaction,
                               n_boot=args.bootstrap, seed=seed)
        wm = fit_working_models(src, target.covariate_names, args.interaction, args.xl_interaction)
        entry = est.to_dict()
        entry["naive_product"] = wm.alpha1 * wm.beta2 * (args.xstar - args.x)
        entries.append(entry)
        estimates.append(est)
    results: dict[str, Any] = {"estimates": entries, "population_meta": None}
    meta = None
    if len(estimates) >= 2:
        meta = population_specific_meta(estimates, method=args.method)
        results["population_meta"] = meta.to_dict()
    diagnostics = {"positivity_flagged": {e.source_study: e.positivity.flagged for e in estimates}}
    inputs = _inputs([("target", args.target)] + [("source", p) for p in args.source],
                     k=len(sources), n_total=sum(s.n for s in sources) + target.n,
                     adjust=list(target.covariate_names),
                     declared_assumptions=list(DECLARED_ASSUMPTIONS))
    _emit(args, _report(args, "IPD case-mix standardization", inputs, results, diagnostics, seed),
          meta)


def cmd_xm_integrate(args):
    seed = _resolve_seed(args)
    outcomes = [read_ipd_csv(p) for p in args.outcome]
    mediators = [read_ipd_csv(p) for p in args.mediator]
    estimates = [
        hybrid_nie(k, j, estimand=args.estimand, x=args.x, x_star=args.xstar,
                   interaction=args.interaction, n_boot=args.bootstrap, seed=seed)
        for k in outcomes for j in mediators
    ]
    results: dict[str, Any] = {"estimates": [e.to_dict() for e in estimates], "summary": None}
    meta = None
    if len(estimates) >= 2:
        meta = summarize_eta(estimates, args.estimand, scheme=args.scheme, method=args.method)
        results["summary"] = meta.to_dict()
    studies = outcomes + mediators
    inputs = _inputs([("outcome", p) for p in args.outcome] + [("mediator", p) for p in args.mediator],
                     k=len(estimates), n_total=sum(s.n for s in studies),
                     adjust=list(outcomes[0].covariate_names),
                     declared_assumptions=[*DECLARED_ASSUMPTIONS, MEDIATOR_CONFOUNDING_ASSUMPTION])
    _emit(args, _report(args, "X-M study integration", inputs, results, {}, seed), meta)


def cmd_simulate(args):
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"{args.config}:0:0: cannot read file ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if args.seed is None and "seed" in raw:
        args.seed = int(raw["seed"])
    seed = _resolve_seed(args)
    try:
        cfg = DGPConfig.from_dict({**raw, "seed": seed})
    except KeyError as exc:
        raise ValidationError(f"{args.config}: invalid DGP config, missing key {exc}") from None
    except TypeError as exc:
        raise ValidationError(f"{args.config}: invalid DGP config ({exc})") from None
    if args.kind == "ipd":
        study = generate_study(cfg, args.study_id)
        write_ipd_csv(args.data, study)
        summary = {"study_id": study.study_id, "n": study.n}
    else:
        agg = generate_aggregates(cfg, args.k, seed, tau2=args.tau2)
        if args.kind == "aggregates":
            write_aggregate_csv(args.data, agg.aggregates)
        else:
            write_correlation_csv(args.data, agg.correlations)
        summary = {"k": args.k, "true_alpha1": agg.true_alpha, "true_beta2": agg.true_beta}
    results = {"dgp": cfg.to_dict(), "data_path": args.data, "data_sha256": file_digest(args.data),
               **summary}
    _emit(args, _report(args, "simulation", _inputs([("config", args.config)]), results, {}, seed))


def appendix1_report(seed: int, n: int) -> tuple[dict, dict]:
    narrow, wide = appendix1_scenario(seed, n=n)
    per_study = {}
    for study in (narrow, wide):
        wm = fit_working_models(study, ())
        est, se = product_of_coefficients(wm)
        per_study[study.study_id] = {
            "unstandardized": est, "se": se,
            "standardized": standardized_indirect(study, wm),
            "sd_x": float(np.std(study.x, ddof=1)), "sd_y": float(np.std(study.y, ddof=1)),
        }
    a, b = per_study["narrow"], per_study["wide"]
    joint_se = math.hypot(a["se"], b["se"])
    agree = abs(a["unstandardized"] - b["unstandardized"]) <= 2 * joint_se
    std_ratio = b["standardized"] / a["standardized"]
    factor_ratio = (b["sd_x"] / b["sd_y"]) / (a["sd_x"] / a["sd_y"])
    comparison = {
        "unstandardized_difference": b["unstandardized"] - a["unstandardized"],
        "joint_se": joint_se,
        "unstandardized_agree": agree,
        "standardized_ratio": std_ratio,
        "sd_factor_ratio": factor_ratio,
        "exposure_sd_ratio": b["sd_x"] / a["sd_x"],
        # same unstandardized effect, standardized effects more than 10% apart
        "divergence": bool(agree and abs(std_ratio - 1.0) > 0.10),
    }
    return per_study, comparison


def cmd_demo_appendix1(args):
    seed = _resolve_seed(args)
    per_study, comparison = appendix1_report(seed, args.n)
    results = {"studies": per_study, "comparison": comparison}
    _emit(args, _report(args, "standardized-coefficient demonstration", _inputs([]), results,
                        {"divergence": comparison["divergence"]}, seed))


def _common(p: argparse.ArgumentParser, forest: bool = False) -> None:
    p.add_argument("--out", required=True, help="JSON report path")
    if forest:
        p.add_argument("--forest", default=None, help="forest CSV path (default: <out>.forest.csv)")
    p.add_argument("--timestamp", action="store_true",
                   help="record wall-clock time in the report (breaks byte-identical reruns)")


def _seeded(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (drawn and echoed if absent)")


def _contrast(p: argparse.ArgumentParser) -> None:
    p.add_argument("--x", type=int, choices=(0, 1), default=0)
    p.add_argument("--xstar", type=int, choices=(0, 1), default=1)
    p.add_argument("--interaction", action="store_true", help="include an X*M outcome term")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medmeta", description="Mediation meta-analysis toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("masem-param", help="pool reported indirect effects")
    p.add_argument("--in", dest="inp", required=True, help="aggregate-record CSV")
    p.add_argument("--method", choices=("dl", "reml"), default="dl")
    _common(p, forest=True)
    p.set_defaults(func=cmd_masem_param)

    p = sub.add_parser("masem-corr", help="pool correlations, then fit the path model")
    p.add_argument("--in", dest="inp", required=True, help="correlation-record CSV")
    p.add_argument("--wls", choices=("closed_form", "nelder_mead"), default="closed_form")
    _common(p)
    p.set_defaults(func=cmd_masem_corr)

    p = sub.add_parser("ml", help="bivariate random-effects model on (a, b)")
    p.add_argument("--in", dest="inp", required=True, help="aggregate-record CSV with path columns")
    p.add_argument("--method", choices=("reml", "ml"), default="reml")
    p.add_argument("--bootstrap", type=int, default=2000)
    _seeded(p)
    _common(p)
    p.set_defaults(func=cmd_ml)

    p = sub.add_parser("ipd-transport", help="case-mix standardized indirect effects")
    p.add_argument("--source", nargs="+", required=True, help="IPD CSV(s) of source studies")
    p.add_argument("--target", required=True, help="IPD CSV of the target population")
    _contrast(p)
    p.add_argument("--xl-interaction", action="store_true", help="include X*L mediator terms")
    p.add_argument("--bootstrap", type=int, default=500)
    p.add_argument("--method", choices=("dl", "reml"), default="dl")
    _seeded(p)
    _common(p, forest=True)
    p.set_defaults(func=cmd_ipd_transport)

    p = sub.add_parser("xm-integrate", help="combine outcome and X-M-only studies")
    p.add_argument("--outcome", nargs="+", required=True, help="IPD CSV(s) with outcomes")
    p.add_argument("--mediator", nargs="+", required=True, help="IPD CSV(s) with x, m")
    p.add_argument("--estimand", choices=ESTIMANDS, default="eta_j")
    p.add_argument("--scheme", choices=("fixed", "random"), default="fixed")
    p.add_argument("--method", choices=("dl", "reml"), default="dl")
    _contrast(p)
    p.add_argument("--bootstrap", type=int, default=500)
    _seeded(p)
    _common(p, forest=True)
    p.set_defaults(func=cmd_xm_integrate)

    p = sub.add_parser("simulate", help="generate synthetic data from a DGP config")
    p.add_argument("--config", required=True, help="DGP config JSON")
    p.add_argument("--kind", choices=("ipd", "aggregates", "correlations"), default="ipd")
    p.add_argument("--data", required=True, help="output data CSV")
    p.add_argument("--k", type=int, default=10, help="number of studies (aggregate kinds)")
    p.add_argument("--tau2", type=float, default=None, help="heterogeneity of a*b")
    p.add_argument("--study-id", default="S1")
    _seeded(p)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("demo-appendix1", help="standardized vs unstandardized indirect effects")
    p.add_argument("--n", type=int, default=5000, help="participants per study")
    _seeded(p)
    _common(p)
    p.set_defaults(func=cmd_demo_appendix1)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConvergenceError as exc:
        print(f"medmeta: convergence error: {exc}", file=sys.stderr)
        return 2
    except (MedMetaError, ValueError) as exc:
        print(f"medmeta: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
