"""
Command-line entry point ``feasem``.

Subcommands: ``fit``, ``infer``, ``simulate``, ``replicate``, ``appendix``
and ``replay``.  Options may also come from a YAML/JSON ``--config`` file
whose keys are option names (``b_self`` or ``b-self``); explicit flags win.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .errors import FeasemError, StageError
from .inference import bootstrap_beta
from .io import RunManifest, file_digest, read_blocks, read_records, write_records, write_table
from .selector import FitConfig, fit_pipeline
from .simlab import METHOD_LABELS, METHODS, SimConfig, appendix_a_check, run_monte_carlo, summarize

logger = logging.getLogger("feasem")

OUT_ENV = "FEASEM_OUT"
TABLE_P = {"3": range(2, 5), "4": range(2, 10), "5": range(2, 7), "6": range(2, 7)}


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _str_list(text):
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _add_fit_options(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-init", type=int, default=10)
    p.add_argument("--b-self", type=int, default=10)
    p.add_argument("--b-cross", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--c-max", type=float, default=10.0)
    p.add_argument("--no-refine", action="store_true",
                   help="skip the continuous constrained refinement of the feasible set")


def _add_data_options(p, required=True):
    p.add_argument("--data", required=required, help="CSV file with a header row")
    p.add_argument("--x-cols", type=_str_list, required=required)
    p.add_argument("--y-cols", type=_str_list, required=required)
    p.add_argument("--filter", default=None, help="keep rows where column=value")
    p.add_argument("--standardize", action="store_true")


def _add_sim_options(p):
    p.add_argument("--case", choices=["1", "2"], default="1")
    p.add_argument("--n", type=int, default=None, help="sample size (default 10, or 7 for case 2)")
    p.add_argument("--m", type=int, default=100, help="Monte Carlo repetitions")
    p.add_argument("--methods", type=_str_list, default=list(METHODS))
    p.add_argument("--beta0", type=float, default=0.6)
    p.add_argument("--n-jobs", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="feasem", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"feasem {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML or JSON file of option defaults")
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./feasem_out)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("fit", help="estimate beta on a CSV dataset")
    common(p); _add_data_options(p); _add_fit_options(p)

    p = sub.add_parser("infer", help="percentile bootstrap for beta on a CSV dataset")
    common(p); _add_data_options(p); _add_fit_options(p)
    p.add_argument("--b-infer", type=int, default=100)
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("simulate", help="Monte Carlo study at one dimension")
    common(p); _add_fit_options(p); _add_sim_options(p)
    p.add_argument("--p", type=int, default=2, help="p1 = p2")

    p = sub.add_parser("replicate", help="regenerate a results table")
    common(p); _add_fit_options(p); _add_sim_options(p)
    _add_data_options(p, required=False)
    p.add_argument("--table", choices=["3", "4", "5", "6", "7"], required=True)
    p.add_argument("--p-list", type=_int_list, default=None, help="override the dimensions")
    p.add_argument("--b-infer", type=int, default=100)
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("appendix", help="loading-energy concentration check")
    common(p)
    p.add_argument("--a", type=float, default=0.3)
    p.add_argument("--b", type=float, default=0.3)
    p.add_argument("--alpha-decay", type=float, default=0.75)
    p.add_argument("--p-list", type=_int_list, default=[10, 100, 1000, 10000])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("replay", help="re-run the command recorded in a result file")
    p.add_argument("record", help="a .jsonl file written by feasem")
    p.add_argument("--out", default=None)
    p.add_argument("--check", action="store_true",
                   help="exit 1 unless the new records equal the recorded ones")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser, sub


def _load_config(path):
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise FeasemError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in cfg.items()}


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    return pre.parse_known_args(argv)[0].config


def parse_args(argv):
    parser, sub = build_parser()
    cfg_path = _config_path(argv)
    command = next((a for a in argv if a in sub.choices), None)
    if cfg_path and command and command != "replay":
        cfg = _load_config(cfg_path)
        sp = sub.choices[command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        for key in ("x_cols", "y_cols", "methods"):
            if key in cfg:
                cfg[key] = _str_list(cfg[key])
        if "p_list" in cfg and not isinstance(cfg["p_list"], list):
            cfg["p_list"] = _int_list(cfg["p_list"])
        sp.set_defaults(**cfg)
        for a in sp._actions:
            if a.dest in cfg:
                a.required = False
    return parser.parse_args(argv)


def _out_dir(args):
    return Path(args.out or os.environ.get(OUT_ENV) or "feasem_out")


def _resolved(args):
    skip = {"out", "config", "verbose", "command", "check", "record"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and not k.startswith("_")}


def _manifest(args, digest=None):
    return RunManifest(args.command, list(getattr(args, "_argv", [])), _resolved(args),
                       int(getattr(args, "seed", 0)), input_digest=digest)


def _fit_config(args):
    return FitConfig(
        n_init=args.n_init, b_self=args.b_self, b_cross=args.b_cross, alpha=args.alpha,
        c_max=args.c_max, refine=not args.no_refine, seed=args.seed,
    )


def _load_data(args):
    data, report = read_blocks(args.data, args.x_cols, args.y_cols, args.filter, args.standardize)
    return data, report, file_digest(args.data)


def _fit_rows(res):
    d = res.diagnostics
    return [
        ["beta_hat", res.beta_hat], ["psi_implied", res.psi_implied], ["SRMR", res.srmr_value],
        ["eps_n", res.eps_n], ["xi_n", res.xi_n], ["delta_hat", res.delta_hat],
        ["pool_size", res.pool_size], ["feasible_size", res.feasible_size],
        ["empty_fallback", str(d.get("empty_fallback"))],
        ["delta_floored", str(d.get("delta_floored"))],
    ]


def cmd_fit(args):
    data, report, digest = _load_data(args)
    res = fit_pipeline(data, _fit_config(args))
    out, man = _out_dir(args), _manifest(args, digest)
    rec = {"n": data.n, "p1": data.p1, "p2": data.p2, "ingest": report._asdict(),
           "result": res.to_dict()}
    write_records(out / "fit.jsonl", man, [rec], "fit_result")
    write_table(out / "fit.txt", man, "Fit result", ["Metric", "Value"], _fit_rows(res))
    print(f"beta_hat = {res.beta_hat:.6g}  SRMR = {res.srmr_value:.4f}")
    return 0


def _bootstrap_rows(res, boot):
    pct = f"{100 * boot.level:g}%"
    return [
        ["beta_hat", f"{res.beta_hat:.3f}"],
        ["Bootstrap mean", f"{boot.mean:.3f}"],
        ["Bootstrap standard deviation", f"{boot.sd:.3f}"],
        [f"{pct} confidence interval", f"[{boot.ci_low:.3f}, {boot.ci_high:.3f}]"],
        ["Significance", f"p={boot.p_value:.3f} (approx.), "
                         + ("significant" if boot.significant else "not significant")],
        ["Minimum SRMR", f"{res.srmr_value:.3f}"],
        ["Replicates used", f"{boot.n_requested - boot.n_failed}/{boot.n_requested}"],
    ]


def _run_infer(args, name):
    data, report, digest = _load_data(args)
    cfg = _fit_config(args)
    res = fit_pipeline(data, cfg)
    boot = bootstrap_beta(data, cfg, args.b_infer, args.level, args.seed)
    out, man = _out_dir(args), _manifest(args, digest)
    rec = {"n": data.n, "p1": data.p1, "p2": data.p2, "ingest": report._asdict(),
           "result": res.to_dict(), "bootstrap": boot.to_dict()}
    write_records(out / f"{name}.jsonl", man, [rec], "bootstrap_result")
    write_table(out / f"{name}.txt", man, "Percentile bootstrap for beta",
                ["Metric", "Value"], _bootstrap_rows(res, boot))
    print(f"beta_hat = {res.beta_hat:.4f}  CI = [{boot.ci_low:.4f}, {boot.ci_high:.4f}]"
          f"  significant = {boot.significant}")
    return 0


def cmd_infer(args):
    return _run_infer(args, "infer")


def _sim_config(args, p):
    n = args.n if args.n is not None else (7 if args.case == "2" else 10)
    return SimConfig(
        n=n, p1=p, p2=p, beta0=args.beta0, case=args.case, M=args.m, n_init=args.n_init,
        B_self=args.b_self, B_cross=args.b_cross, seed=args.seed,
    )


def _simulate(args, p_list):
    bad = sorted(set(args.methods) - set(METHODS))
    if bad:
        raise FeasemError(f"unknown methods: {', '.join(bad)}")
    records, reports = [], {}
    for p in p_list:
        cfg = _sim_config(args, p)
        recs = run_monte_carlo(cfg, args.methods, n_jobs=args.n_jobs, fit_overrides={
            "alpha": args.alpha, "c_max": args.c_max, "refine": not args.no_refine,
        })
        records += recs
        reports.update(summarize(recs, cfg.beta0, seed=args.seed))
        logger.info("p=%d done", p)
    return records, reports


def _metric_rows(reports):
    return [r.to_dict() for _, r in sorted(reports.items())]


def _ci(v):
    return None if v is None else f"[{v[0]:.3f}, {v[1]:.3f}]"


def _table3(reports, methods, p_list):
    header = ["p", "Method", "Valid", "Bias", "Bias CI", "Var", "Var CI", "RMSE", "RMSE CI"]
    rows = []
    for p in p_list:
        for m in methods:
            r = reports[(m, p)]
            rows.append([p, METHOD_LABELS[m], r.valid_rate, r.bias, _ci(r.bias_ci), r.var,
                         _ci(r.var_ci), r.rmse, _ci(r.rmse_ci)])
    return "Error metrics by method", header, rows


def _table4(reports, methods, p_list):
    header = ["p"] + [METHOD_LABELS[m] for m in methods]
    rows = [[p] + [reports[(m, p)].valid_rate for m in methods] for p in p_list]
    return "Share of valid trials by method", header, rows


def _table5(reports, methods, p_list):
    header = ["p"] + [f"{METHOD_LABELS[m]} {s}" for m in methods for s in ("pos", "neg")]
    rows = []
    for p in p_list:
        row = [p]
        for m in methods:
            r = reports[(m, p)]
            row += [r.pos_ratio, r.neg_ratio]
        rows.append(row)
    return "Sign shares of beta_hat - beta0", header, rows


def _table6(reports, methods, p_list):
    header = ["p"] + [METHOD_LABELS[m] for m in methods]
    rows = [[p] + [reports[(m, p)].iqr for m in methods] for p in p_list]
    return "Interquartile range of beta_hat - beta0", header, rows


def cmd_simulate(args):
    records, reports = _simulate(args, [args.p])
    out, man = _out_dir(args), _manifest(args)
    write_records(out / "trials.jsonl", man, [r.to_dict() for r in records], "trial")
    write_records(out / "metrics.jsonl", man, _metric_rows(reports), "metrics")
    title, header, rows = _table3(reports, args.methods, [args.p])
    write_table(out / "metrics.txt", man, title, header, rows)
    print(f"{len(records)} trial records written to {out}")
    return 0


def cmd_replicate(args):
    if args.table == "7":
        if not (args.data and args.x_cols and args.y_cols):
            raise FeasemError("table 7 needs --data, --x-cols and --y-cols")
        return _run_infer(args, "table7")
    p_list = args.p_list or list(TABLE_P[args.table])
    records, reports = _simulate(args, p_list)
    out, man = _out_dir(args), _manifest(args)
    build = {"3": _table3, "4": _table4, "5": _table5, "6": _table6}[args.table]
    title, header, rows = build(reports, args.methods, p_list)
    stem = f"table{args.table}"
    write_records(out / f"{stem}_trials.jsonl", man, [r.to_dict() for r in records], "trial")
    write_records(out / f"{stem}.jsonl", man, _metric_rows(reports), "metrics")
    fmt = "{:.2f}" if args.table in ("4", "5") else "{:.4f}"
    write_table(out / f"{stem}.txt", man, title, header, rows, fmt)
    print((out / f"{stem}.txt").read_text(encoding="utf-8"))
    return 0


def cmd_appendix(args):
    rows = appendix_a_check(args.a, args.b, args.alpha_decay, args.p_list, strict=False)
    out, man = _out_dir(args), _manifest(args)
    write_records(out / "appendix.jsonl", man, rows, "concentration")
    write_table(out / "appendix.txt", man, "Loading-energy concentration",
                ["p", "ratio", "1 - ratio", "max tail"],
                [[r["p"], r["ratio"], r["gap"], r["tail_max"]] for r in rows], "{:.6g}")
    for r in rows:
        print(f"p={r['p']:>6}  ratio={r['ratio']:.6f}  tail_max={r['tail_max']:.3e}")
    return 0


COMMANDS = {
    "fit": cmd_fit, "infer": cmd_infer, "simulate": cmd_simulate,
    "replicate": cmd_replicate, "appendix": cmd_appendix,
}
RECORD_FILES = {
    "fit": ["fit.jsonl"], "infer": ["infer.jsonl"], "simulate": ["trials.jsonl", "metrics.jsonl"],
    "appendix": ["appendix.jsonl"],
}


def _record_files(command, config):
    if command == "replicate":
        t = config["table"]
        return [f"table{t}.jsonl"] if t == "7" else [f"table{t}_trials.jsonl", f"table{t}.jsonl"]
    return RECORD_FILES[command]


def cmd_replay(args):
    """Re-run from a manifest; with ``--check`` compare records to the originals."""
    src = Path(args.record)
    man, _ = read_records(src)
    ns = argparse.Namespace(**man.config)
    ns.command, ns.out, ns.verbose, ns.config = man.command, args.out, args.verbose, None
    ns._argv = man.argv
    status = COMMANDS[man.command](ns)
    if status or not args.check:
        return status
    new_dir = _out_dir(ns)
    for name in _record_files(man.command, man.config):
        _, old = read_records(src.parent / name)
        _, new = read_records(new_dir / name)
        if old != new:
            print(f"replay mismatch in {name}", file=sys.stderr)
            return 1
    print("replay matches the recorded output")
    return 0


def _error_record(args, exc):
    rec = {"type": "error", "error": type(exc).__name__, "message": str(exc),
           "stage": getattr(exc, "stage", None)}
    try:
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps(rec, sort_keys=True) + "\n", encoding="utf-8")
    except OSError:
        pass
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)


def _strip_out(argv):
    # the output location must not leak into otherwise identical result files
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out":
            skip = True
        elif not a.startswith("--out="):
            out.append(a)
    return out


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args._argv = _strip_out(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args)
        return COMMANDS[args.command](args)
    except (FeasemError, StageError, ValueError, OSError) as exc:
        _error_record(args, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
