"""Command-line interface: ``rtpower <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import shlex
import sys
import time
from datetime import datetime, timezone
from importlib import resources

from . import __version__
from .core_types import ValidationError
from .io import (
    BUNDLED,
    DataIOError,
    Report,
    bundled_scenario_path,
    file_digest,
    load_trials,
    power_rows,
    report_json,
    resolve_scenario,
    write_report,
    write_trials,
)
from .lmm import NumericalError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

COMMON_DEFAULTS = {
    "seed": 0,
    "nsim": 500,
    "threads": 1,
    "threshold": 1.96,
    "criterion": "reml",
    "failures": "exclude",
    "col": None,
    "quiet": False,
    "allow_nonpositive_rt": False,
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for numerical failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(suppress: bool) -> argparse.ArgumentParser:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p = _Parser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, help="base seed (default 0)", **d)
    g.add_argument("--nsim", type=int, help="simulated datasets per cell (default 500)", **d)
    g.add_argument("--threads", type=int, help="worker processes (default 1)", **d)
    g.add_argument("--threshold", type=float, help="|t| threshold for significance (default 1.96)", **d)
    g.add_argument("--criterion", choices=["reml", "ml"], type=str.lower, help="estimation criterion", **d)
    g.add_argument("--failures", choices=["exclude", "nonsig"], help="how failed fits enter power", **d)
    g.add_argument("--col", action="append", metavar="FIELD=HEADER",
                   help="map a trial field to a CSV header, e.g. participant_id=subject", **d)
    g.add_argument("--quiet", action="store_true", help="no progress output", **d)
    g.add_argument("--allow-nonpositive-rt", action="store_true",
                   help="accept rt_ms <= 0 (simulated data can reach them)", **d)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = _Parser(prog="rtpower", description="Simulation-based power and variability analyses for "
                     "crossed participant x item naming-latency designs.", parents=[common])
    parser.add_argument("--version", action="version", version=f"rtpower {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common], description=help_)

    scen_help = f"bundled name ({', '.join(BUNDLED)}) or path to a scenario JSON"

    p = add("simulate", "simulate one trial-level dataset to CSV")
    p.add_argument("--scenario", default="lab_phonological", help=scen_help)
    p.add_argument("--participants", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--no-correlations", action="store_true", help="zero all random-effect correlations")
    p.add_argument("--out", default="trials.csv", help="output CSV path")

    p = add("fit", "fit the crossed mixed model to a trial CSV")
    p.add_argument("trials")
    p.add_argument("--nboot", type=int, default=500, help="parametric bootstrap draws for CIs; 0 disables")
    p.add_argument("--out", help="report prefix (writes PREFIX.json and PREFIX.csv)")

    p = add("power", "power curve over a participants x items grid")
    p.add_argument("--scenario", default="lab_phonological", help=scen_help)
    p.add_argument("--participants", type=_int_list, help="comma-separated counts (default 12..96 by 12)")
    p.add_argument("--items", type=_int_list, help="comma-separated counts (default 20,40,90)")
    p.add_argument("--slope-sd", type=float, help="override the by-participant relatedness sd (ms)")
    p.add_argument("--out", default="power", help="report prefix")

    p = add("sweep", "power as a function of the residual sd")
    p.add_argument("--scenario", default="online_phonological", help=scen_help)
    p.add_argument("--participants", type=int, default=45)
    p.add_argument("--items", type=int, default=90)
    p.add_argument("--residual-sds", type=_float_list, help="comma-separated sds (default 100..300 by 50)")
    p.add_argument("--slope-sd", type=float, help="override the by-participant relatedness sd (ms)")
    p.add_argument("--out", default="sweep", help="report prefix")

    p = add("reliability", "odd/even split-half reliability, compared across two datasets if given")
    p.add_argument("trials", nargs="+", help="one or two trial CSVs")
    p.add_argument("--out", help="report prefix")

    p = add("varcomp", "F-tests on between-participant variability of two datasets")
    p.add_argument("trials", nargs="*", help="two trial CSVs (a then b)")
    p.add_argument("--stats", type=float, nargs=4, metavar=("SD_A", "N_A", "SD_B", "N_B"),
                   help="test given sds directly instead of fitting data")
    p.add_argument("--out", help="report prefix")

    p = add("compare", "lab vs on-line comparison: location-scale fit and setting x relatedness model")
    p.add_argument("lab")
    p.add_argument("online")
    p.add_argument("--nboot", type=int, default=2000, help="bootstrap draws for the location-scale CIs")
    p.add_argument("--no-interaction", action="store_true", help="skip the mixed-model interaction fit")
    p.add_argument("--out", help="report prefix")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    for k, v in COMMON_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    problems = []
    if args.nsim < 1:
        problems.append(f"--nsim must be >= 1, got {args.nsim}")
    if args.threads < 1:
        problems.append(f"--threads must be >= 1, got {args.threads}")
    if problems:
        raise UsageError(problems)
    return args


def column_map(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--col expects FIELD=HEADER, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load(args, path):
    return load_trials(path, column_map(args.col), require_positive_rt=not args.allow_nonpositive_rt)


def reproduce_line(args) -> str:
    """Exact invocation with every option resolved, printed on each run."""
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("command",)}
    parts = ["rtpower", args.command]
    for k, v in opts.items():
        flag = "--" + k.replace("_", "-")
        if v is None or v is False:
            continue
        if v is True:
            parts.append(flag)
        elif k in ("trials", "lab", "online"):
            continue
        elif isinstance(v, list) and k == "col":
            for item in v:
                parts += [flag, item]
        elif isinstance(v, list) and k == "stats":
            parts += [flag] + [repr(x) for x in v]
        elif isinstance(v, list):
            parts += [flag, ",".join(str(x) for x in v)]
        else:
            parts += [flag, str(v)]
    for k in ("trials", "lab", "online"):
        v = getattr(args, k, None)
        if isinstance(v, list):
            parts += v
        elif v:
            parts.append(v)
    return " ".join(shlex.quote(p) for p in parts)


def _announce(args) -> None:
    print(f"# rtpower {__version__} seed={args.seed}", file=sys.stderr)
    print(f"# reproduce: {reproduce_line(args)}", file=sys.stderr)


def _scenario_digest(name_or_path: str) -> dict:
    if name_or_path in BUNDLED:
        with resources.as_file(bundled_scenario_path(name_or_path)) as p:
            return {f"bundled:{name_or_path}": file_digest(p)}
    return {name_or_path: file_digest(name_or_path)}


def _progress(args):
    if args.quiet:
        return None
    state = {"last": 0.0}

    def report(done, total):
        now = time.monotonic()
        if done == total or (sys.stderr.isatty() and now - state["last"] > 1.0):
            state["last"] = now
            end = "\n" if done == total else ""
            print(f"\r  {done}/{total} replicates", end=end, file=sys.stderr, flush=True)

    return report


def _request(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("quiet",)}


def _emit(report: Report, args, text: str) -> None:
    if getattr(args, "out", None):
        paths = write_report(report, args.out)
        for p in paths:
            print(f"# wrote {p}", file=sys.stderr)
    print(text)


# ------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    from .simulate import simulate_trials

    s = resolve_scenario(args.scenario)
    s = s.with_sizes(args.participants, args.items)
    if args.no_correlations:
        s = s.without_correlations()
    table = simulate_trials(s, args.seed)
    path = write_trials(table, args.out)
    print(f"wrote {len(table)} trials ({s.n_participants} participants x {s.n_items} items) to {path}")
    return EXIT_OK


def cmd_fit(args, started: float) -> int:
    from .lmm import ModelSpec, build_design, check_full_rank, fit_design, parametric_bootstrap
    from .report_text import fit_table

    table = _load(args, args.trials).correct_only()
    spec = ModelSpec(criterion=args.criterion)
    design = build_design(table, spec)
    check_full_rank(design.X, design.fixed_terms)
    fit = fit_design(design, spec.criterion)
    boot = None
    if fit.converged and args.nboot > 0:
        boot = parametric_bootstrap(design, fit, args.nboot, args.seed)
    intervals = boot["intervals"] if boot else None
    results = [
        {"term": t, "estimate": fit.estimates[t], "se": fit.std_errors[t], "t": fit.t_values[t],
         "ci_low": intervals[f"fixed:{t}"][0] if intervals else None,
         "ci_high": intervals[f"fixed:{t}"][1] if intervals else None}
        for t in fit.estimates
    ]
    report = Report(
        command="fit", request=_request(args), results=results,
        details={"fit": fit.to_dict(), "bootstrap": boot}, base_seed=args.seed,
        timing=_timing(started), input_digests={args.trials: file_digest(args.trials)},
    )
    _emit(report, args, report_json(report) + "\n" + fit_table(fit, intervals))
    return EXIT_OK if fit.converged else EXIT_NUMERICAL


def _power_request(args, scenario, **grid):
    from .power import PowerGridRequest

    return PowerGridRequest(
        base=scenario, n_sim=args.nsim, threshold=args.threshold, base_seed=args.seed,
        slope_sd_override=args.slope_sd, criterion=args.criterion.upper(), failures=args.failures, **grid,
    )


def cmd_power(args, started: float) -> int:
    from .power import DEFAULT_ITEMS, DEFAULT_PARTICIPANTS, power_curve
    from .report_text import rows_table

    s = resolve_scenario(args.scenario)
    req = _power_request(args, s, participants=args.participants or DEFAULT_PARTICIPANTS,
                         items=args.items or DEFAULT_ITEMS)
    cells = power_curve(req, workers=args.threads, progress=_progress(args))
    rows = power_rows(cells)
    report = Report(command="power", request=req.to_dict() | {"scenario": args.scenario}, results=rows,
                    base_seed=args.seed, timing=_timing(started), input_digests=_scenario_digest(args.scenario))
    cols = ["n_participants", "n_items", "n_converged", "n_significant", "power", "mc_se"]
    _emit(report, args, rows_table(rows, cols))
    return EXIT_OK


def cmd_sweep(args, started: float) -> int:
    from .power import DEFAULT_RESIDUAL_SDS, residual_sweep
    from .report_text import rows_table

    s = resolve_scenario(args.scenario)
    req = _power_request(args, s, participants=(args.participants,), items=(args.items,),
                         residual_sds=args.residual_sds or DEFAULT_RESIDUAL_SDS)
    cells = residual_sweep(req, workers=args.threads, progress=_progress(args))
    rows = power_rows(cells)
    report = Report(command="sweep", request=req.to_dict() | {"scenario": args.scenario}, results=rows,
                    base_seed=args.seed, timing=_timing(started), input_digests=_scenario_digest(args.scenario))
    cols = ["residual_sd", "n_converged", "n_significant", "power", "mc_se"]
    _emit(report, args, rows_table(rows, cols))
    return EXIT_OK


def cmd_reliability(args, started: float) -> int:
    from .report_text import rows_table
    from .variability import compare_correlations, split_half

    if len(args.trials) > 2:
        raise UsageError("reliability takes one or two trial files")
    rows, details = [], {}
    for path in args.trials:
        res = split_half(_load(args, path))
        rows.append({"dataset": path, "n_participants": res.n, "r": res.r, "ci_low": res.ci_low,
                     "ci_high": res.ci_high})
        details[path] = res.to_dict()
    if len(rows) == 2:
        a, b = rows
        details["comparison"] = compare_correlations(a["r"], a["n_participants"], b["r"], b["n_participants"])
    report = Report(command="reliability", request=_request(args), results=rows, details=details,
                    base_seed=args.seed, timing=_timing(started),
                    input_digests={p: file_digest(p) for p in args.trials})
    text = rows_table(rows, ["dataset", "n_participants", "r", "ci_low", "ci_high"])
    if "comparison" in details:
        c = details["comparison"]
        text += f"\n\nFisher z = {c['z']:.3f}, two-sided p = {c['p_two_sided']:.4f}"
    _emit(report, args, text)
    return EXIT_OK


def cmd_varcomp(args, started: float) -> int:
    from .report_text import rows_table
    from .variability import descriptive_slope_sd, variance_ratio_test

    rows, details, digests = [], {}, {}
    if args.stats:
        sd_a, n_a, sd_b, n_b = args.stats
        if n_a != int(n_a) or n_b != int(n_b):
            raise UsageError("--stats group sizes must be integers")
        res = variance_ratio_test(sd_a, int(n_a), sd_b, int(n_b))
        rows.append({"quantity": "given sds", "sd_a": sd_a, "sd_b": sd_b} | res.to_dict())
    else:
        if len(args.trials) != 2:
            raise UsageError("varcomp needs two trial files (or --stats SD_A N_A SD_B N_B)")
        from .lmm import ModelSpec, fit_lmm

        tables = [_load(args, p).correct_only() for p in args.trials]
        digests = {p: file_digest(p) for p in args.trials}
        desc = [descriptive_slope_sd(t) for t in tables]
        n = [len(d["per_participant_diffs"]) for d in desc]
        res = variance_ratio_test(desc[0]["sd"], n[0], desc[1]["sd"], n[1])
        rows.append({"quantity": "descriptive relatedness sd", "sd_a": desc[0]["sd"], "sd_b": desc[1]["sd"]}
                    | res.to_dict())
        fits = [fit_lmm(t, ModelSpec(criterion=args.criterion)) for t in tables]
        details["fits"] = {p: f.to_dict() for p, f in zip(args.trials, fits)}
        details["descriptive"] = {p: d for p, d in zip(args.trials, desc)}
        if not all(f.converged for f in fits):
            raise NumericalError("mixed-model fit failed for at least one dataset")
        for k, term in enumerate(fits[0].varcomp.by_participant.term_names):
            sa = fits[0].varcomp.by_participant.sds[k]
            sb = fits[1].varcomp.by_participant.sds[k]
            if sa > 0 and sb > 0:
                res = variance_ratio_test(sa, n[0], sb, n[1])
                rows.append({"quantity": f"model participant {term} sd", "sd_a": sa, "sd_b": sb} | res.to_dict())
    report = Report(command="varcomp", request=_request(args), results=rows, details=details,
                    base_seed=args.seed, timing=_timing(started), input_digests=digests)
    _emit(report, args, rows_table(rows, ["quantity", "sd_a", "sd_b", "f", "df1", "df2", "p"]))
    return EXIT_OK


def combine_settings(lab, online):
    """Stack two trial tables with a setting column; participant ids are prefixed per setting."""
    import pandas as pd

    from .core_types import TrialTable

    frames = []
    for setting, t in (("lab", lab), ("online", online)):
        df = t.data.copy()
        df["setting"] = setting
        df["participant_id"] = setting + ":" + df["participant_id"].astype(str)
        frames.append(df)
    return TrialTable(pd.concat(frames, ignore_index=True), require_positive_rt=False)


def cmd_compare(args, started: float) -> int:
    from .report_text import table
    from .variability import location_scale_fit

    lab = _load(args, args.lab).correct_only()
    online = _load(args, args.online).correct_only()
    ls = location_scale_fit(lab, online, n_boot=args.nboot, seed=args.seed)
    rows = [
        {"quantity": "mean difference (online - lab)", "estimate": ls["mean_diff"],
         "ci_low": ls["mean_ci"][0], "ci_high": ls["mean_ci"][1]},
        {"quantity": "sd difference (online - lab)", "estimate": ls["sd_diff"],
         "ci_low": ls["sd_ci"][0], "ci_high": ls["sd_ci"][1]},
    ]
    details = {"location_scale": ls}
    status = EXIT_OK
    if not args.no_interaction:
        from .lmm import ModelSpec, fit_lmm

        fit = fit_lmm(combine_settings(lab, online), ModelSpec.interaction(args.criterion))
        details["interaction_fit"] = fit.to_dict()
        term = "setting:relatedness"
        rows.append({"quantity": f"{term} effect", "estimate": fit.estimates[term],
                     "se": fit.std_errors[term], "t": fit.t_values[term]})
        if not fit.converged:
            status = EXIT_NUMERICAL
    report = Report(command="compare", request=_request(args), results=rows, details=details,
                    base_seed=args.seed, timing=_timing(started),
                    input_digests={args.lab: file_digest(args.lab), args.online: file_digest(args.online)},
                    columns=["quantity", "estimate", "ci_low", "ci_high", "se", "t"])
    text = table(["quantity", "estimate", "ci_low", "ci_high", "se", "t"],
                 [[r.get(c) for c in ("quantity", "estimate", "ci_low", "ci_high", "se", "t")] for r in rows])
    _emit(report, args, text)
    return status


def _timing(started: float) -> dict:
    return {
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "elapsed_s": round(time.monotonic() - started, 3),
    }


COMMANDS = {
    "simulate": lambda a, t: cmd_simulate(a),
    "fit": cmd_fit,
    "power": cmd_power,
    "sweep": cmd_sweep,
    "reliability": cmd_reliability,
    "varcomp": cmd_varcomp,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    started = time.monotonic()
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    _announce(args)
    try:
        return COMMANDS[args.command](args, started)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
