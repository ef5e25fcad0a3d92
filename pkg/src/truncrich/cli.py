"""Command-line interface.

Subcommands:

* ``estimate``    fit one dataset and report all estimates
* ``select-tau``  threshold-selection trace (risk-curve data)
* ``simulate``    Monte Carlo evaluation of a synthetic design
* ``compare``     estimators side by side on one dataset
* ``extrapolate`` enlarged-sample distinct-count forecasts
* ``diagnose``    efficiency diagnostics at fitted parameters

Reports are JSON by default (stable schema, ``schema_version`` field);
table-like outputs offer CSV.  Exit codes: 0 success, 2 usage or input
error, 3 numerical failure; errors are written to stderr as JSON.
Stochastic commands require ``--seed`` and echo it in the report.
``TRUNCRICH_THREADS`` sets the default process count for simulation.
"""

import argparse
import json
import math
import sys

from .counts import CountData, CountFormatError, load_counts
from .families import family_from_string
from .fit import FitError, FitOptions, chao, fit_full, zelterman_theta
from .growth import growth_curve, growth_experiment, growth_points_csv, tokenize
from .selection import select_tau
from .simulate import CustomNuisance, SimDesign, UniformNuisance, run_monte_carlo

SCHEMA_VERSION = 1


def _read_source(path: str) -> bytes:
    if path == "-":
        return sys.stdin.buffer.read()
    with open(path, "rb") as fh:
        return fh.read()


def _load_input(args) -> CountData:
    raw = _read_source(args.input)
    if args.input_format == "text":
        return tokenize(raw)
    return load_counts(raw, format=args.input_format, provenance=args.input)


def _parse_tau(value: str) -> int | str:
    if value == "auto":
        return "auto"
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"--tau must be an integer or 'auto', got {value!r}") from None


def _require_seed(args, why: str) -> int:
    if args.seed is None:
        raise ValueError(f"--seed is required for {why}")
    return args.seed


def _emit(args, payload, csv_text: str | None = None) -> None:
    if getattr(args, "format", "json") == "csv":
        if csv_text is None:
            raise ValueError("csv output is not available for this command")
        text = csv_text
    else:
        text = json.dumps(payload, indent=2) + "\n"
    if args.output and args.output != "-":
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ValueError(f"expected a comma-separated number list, got {text!r}") from None


def _parse_nuisance(text: str):
    kind, _, rest = text.partition(":")
    if kind == "uniform":
        lo, _, hi = rest.partition(":")
        return UniformNuisance(int(lo), int(hi))
    if kind == "custom":
        pmf = {}
        for item in rest.split(","):
            x, _, p = item.partition(":")
            pmf[int(x)] = float(p)
        return CustomNuisance(pmf)
    raise ValueError(f"unknown nuisance {text!r}; use uniform:LO:HI or custom:x:p,...")


def _fit_report(args, data, family, tau: int, selection=None) -> dict:
    result = fit_full(data, family, FitOptions(tau=tau), with_diagnostics=True)
    report = {"schema_version": SCHEMA_VERSION, "input": args.input}
    report.update(result.to_dict())
    try:
        report["chao"] = chao(data)
    except ValueError as exc:
        report["chao"] = None
        report["chao_reason"] = str(exc)
    if getattr(args, "integer", False):
        report["n_hat_integer"] = math.floor(result.n_hat)
    if selection is not None:
        report["selected_tau"] = selection.selected_tau
        report["selection_target"] = selection.target
        report["selection_trace"] = selection.to_json_dict()["records"]
        report["seed"] = args.seed
    return report


def _resolve_tau(args, data, family):
    tau = _parse_tau(args.tau)
    if tau == "auto":
        seed = _require_seed(args, "--tau auto")
        trace = select_tau(data, family, m_boot=args.bootstrap, seed=seed,
                           target=args.target)
        return trace.selected_tau, trace
    return tau, None


def cmd_estimate(args) -> dict:
    data = _load_input(args)
    family = family_from_string(args.family)
    tau, trace = _resolve_tau(args, data, family)
    return _fit_report(args, data, family, tau, selection=trace)


def cmd_select_tau(args) -> tuple[dict, str]:
    data = _load_input(args)
    family = family_from_string(args.family)
    seed = _require_seed(args, "select-tau")
    trace = select_tau(data, family, tau_min=args.tau_min, tau_max=args.tau_max,
                       m_boot=args.bootstrap, seed=seed, target=args.target)
    payload = {"schema_version": SCHEMA_VERSION, "input": args.input,
               "family": family.name, "seed": seed}
    payload.update(trace.to_json_dict())
    return payload, trace.to_csv()


def cmd_simulate(args) -> tuple[dict, str]:
    seed = _require_seed(args, "simulate")
    family = family_from_string(args.family)
    theta = _float_list(args.theta)
    design = SimDesign(
        n_true=args.n_true, q_true=args.q, family=family, theta=tuple(theta),
        nuisance=_parse_nuisance(args.nuisance), reps=args.reps,
        m_boot=args.bootstrap, ci_level=args.ci_level, seed=seed)
    report = run_monte_carlo(design, tau_policy=_parse_tau(args.tau),
                             selection_target=args.target,
                             keep_replicates=args.per_replicate,
                             workers=args.workers)
    payload = {"schema_version": SCHEMA_VERSION, "seed": seed}
    payload.update(report.to_json_dict())
    return payload, report.to_csv()


def cmd_compare(args) -> dict:
    data = _load_input(args)
    family = family_from_string(args.family)
    tau, trace = _resolve_tau(args, data, family)
    result = fit_full(data, family, FitOptions(tau=tau))
    report = {
        "schema_version": SCHEMA_VERSION,
        "input": args.input,
        "family": family.name,
        "tau": tau,
        "d": result.d,
        "q_clamped": result.q_clamped,
        "theta_boundary": result.theta_boundary,
        "estimates": {
            "n_hat": result.n_hat,
            "n_classical": result.n_classical,
        },
    }
    try:
        report["estimates"]["chao"] = chao(data)
    except ValueError as exc:
        report["estimates"]["chao"] = None
        report["chao_reason"] = str(exc)
    try:
        report["zelterman_theta"] = zelterman_theta(data)
    except ValueError:
        report["zelterman_theta"] = None
    if trace is not None:
        report["selected_tau"] = trace.selected_tau
        report["seed"] = args.seed
    return report


def cmd_extrapolate(args) -> tuple[dict, str]:
    family = family_from_string(args.family)
    if args.fractions:
        if args.input_format != "text":
            raise ValueError("--fractions requires --input-format text "
                             "(prefix growth needs token order)")
        if args.tau == "auto":
            _require_seed(args, "--tau auto")
        points = growth_experiment(
            _read_source(args.input), family,
            fractions=_float_list(args.fractions),
            tau=_parse_tau(args.tau), seed=args.seed or 0,
            m_boot=args.bootstrap, selection_target=args.target)
        payload = {
            "schema_version": SCHEMA_VERSION, "input": args.input,
            "family": family.name, "mode": "fractions",
            "points": [p.__dict__ for p in points],
        }
        if args.tau == "auto":
            payload["seed"] = args.seed
        return payload, growth_points_csv(points)
    data = _load_input(args)
    tau, trace = _resolve_tau(args, data, family)
    result = fit_full(data, family, FitOptions(tau=tau))
    curve = growth_curve(result, family, _float_list(args.gammas))
    payload = {
        "schema_version": SCHEMA_VERSION, "input": args.input,
        "family": family.name, "mode": "gammas", "tau": tau,
        "base_d": curve.base_d,
        "points": [{"gamma": g, "e_gamma_d": v} for g, v in curve.points],
    }
    if trace is not None:
        payload["selected_tau"] = trace.selected_tau
        payload["seed"] = args.seed
    return payload, curve.to_csv()


def cmd_diagnose(args) -> dict:
    from . import efficiency

    data = _load_input(args)
    family = family_from_string(args.family)
    tau = _parse_tau(args.tau)
    if tau == "auto":
        raise ValueError("diagnose needs an explicit --tau")
    result = fit_full(data, family, FitOptions(tau=tau), with_diagnostics=True)
    info = efficiency.fisher_information(family, result.theta_hat, result.q_hat, tau)
    return {
        "schema_version": SCHEMA_VERSION,
        "input": args.input,
        "family": family.name,
        "tau": tau,
        "theta_hat": [float(v) for v in result.theta_hat],
        "q_hat": result.q_hat,
        "q_clamped": result.q_clamped,
        "score_residual": result.score_residual,
        "fisher_information": [[float(v) for v in row] for row in info],
        "asym_cov": [[float(v) for v in row] for row in result.asym_cov],
        "se_n": result.se_n,
    }


def _add_io_options(p, formats=("pairs", "raw", "text")):
    p.add_argument("--input", required=True, help="input path, or - for stdin")
    p.add_argument("--input-format", choices=formats, default="pairs")
    p.add_argument("--output", default="-", help="output path (default stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def _add_model_options(p):
    p.add_argument("--family", default="poisson",
                   help="poisson, negbin, or poisson-mixture:J")
    p.add_argument("--bootstrap", type=int, default=100, metavar="M")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--target", choices=("P0", "N"), default="P0",
                   help="statistic driving threshold selection")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="truncrich",
        description="Species richness estimation from zero-truncated abundance counts")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit one dataset")
    _add_io_options(p)
    _add_model_options(p)
    p.add_argument("--tau", default="auto")
    p.add_argument("--integer", action="store_true",
                   help="also report floor(n_hat)")
    p.set_defaults(handler=lambda a: (cmd_estimate(a), None))

    p = sub.add_parser("select-tau", help="threshold-selection trace")
    _add_io_options(p)
    _add_model_options(p)
    p.add_argument("--tau-min", type=int, default=None)
    p.add_argument("--tau-max", type=int, default=None)
    p.set_defaults(handler=cmd_select_tau)

    p = sub.add_parser("simulate", help="Monte Carlo evaluation")
    p.add_argument("--output", default="-")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    _add_model_options(p)
    p.add_argument("--n-true", type=int, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--theta", required=True, help="comma-separated parameter values")
    p.add_argument("--nuisance", default="uniform:10:40")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--tau", default="auto")
    p.add_argument("--per-replicate", action="store_true",
                   help="include raw per-replicate values in JSON output")
    p.add_argument("--workers", type=int, default=None,
                   help="process count (default TRUNCRICH_THREADS or 1)")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("compare", help="all estimators side by side")
    _add_io_options(p)
    _add_model_options(p)
    p.add_argument("--tau", default="auto")
    p.set_defaults(handler=lambda a: (cmd_compare(a), None))

    p = sub.add_parser("extrapolate", help="enlarged-sample forecasts")
    _add_io_options(p)
    _add_model_options(p)
    p.add_argument("--tau", default="auto")
    p.add_argument("--gammas", default="1,2,5,10")
    p.add_argument("--fractions", default=None,
                   help="prefix fractions for text growth (text input only)")
    p.set_defaults(handler=cmd_extrapolate)

    p = sub.add_parser("diagnose", help="efficiency diagnostics")
    _add_io_options(p)
    _add_model_options(p)
    p.add_argument("--tau", required=True)
    p.set_defaults(handler=lambda a: (cmd_diagnose(a), None))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out = args.handler(args)
        payload, csv_text = out if isinstance(out, tuple) else (out, None)
        _emit(args, payload, csv_text)
        return 0
    except (CountFormatError, ValueError, OSError) as exc:
        _error(exc)
        return 2
    except FitError as exc:
        _error(exc)
        return 3


def _error(exc: Exception) -> None:
    sys.stderr.write(json.dumps(
        {"error": {"type": type(exc).__name__, "message": str(exc)}}) + "\n")


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
