"""Command-line interface: simulate, fit, se, bench.

Exit status 0 on success, 2 for usage, configuration or input-schema errors,
1 for failures during fitting.  Errors go to standard error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import BenchPlan, run_bench
from .em import em_fit
from .inference import standard_errors
from .io import (ConfigError, InputError, RunConfig, build_report, dumps_report, format_table,
                 ingest, load_config, parse_config, write_simulated)
from .model import ModelError
from .scan import ScanError

log = logging.getLogger("jointscan")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointscan", description="Joint longitudinal and competing-risks models "
                                              "fitted by EM with linear-scan risk-set kernels.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a simulated longitudinal/survival CSV pair")
    s.add_argument("--config", help="JSON config; its 'simulate' block sets the design")
    s.add_argument("--out-prefix", required=True, help="writes PREFIX_long.csv and PREFIX_surv.csv")
    s.add_argument("--seed", type=int)
    s.add_argument("--n", type=int, help="number of subjects")

    for name, text in (("fit", "fit the joint model and write a JSON report"),
                       ("se", "fit, then always compute standard errors")):
        f = sub.add_parser(name, help=text)
        f.add_argument("--config", help="JSON run configuration")
        f.add_argument("--long", required=True, help="longitudinal CSV (id,time,y,...)")
        f.add_argument("--surv", required=True, help="survival CSV (id,obs_time,cause,...)")
        f.add_argument("--out", help="JSON report path")
        f.add_argument("--drop-post-event", action="store_true",
                       help="discard measurements after a subject's obs_time instead of failing")
        f.add_argument("--omit-timing", action="store_true",
                       help="leave wall-clock timings out of the report (byte-reproducible output)")

    b = sub.add_parser("bench", help="time scan and naive backends")
    b.add_argument("--config", help="JSON config with optional 'bench' and 'simulate' blocks")
    b.add_argument("--plan", help="JSON file with BenchPlan fields")
    b.add_argument("--sizes", type=_sizes, help="comma-separated sample sizes")
    b.add_argument("--budget", type=float, help="seconds per cell before skipping")
    b.add_argument("--methods", help="comma-separated subset of methods")
    b.add_argument("--repetitions", type=int)
    b.add_argument("--out", help="CSV results path")
    return p


def _config(path) -> RunConfig:
    return load_config(path) if path else parse_config({})


def cmd_simulate(args) -> int:
    cfg = _config(args.config).sim_config(args.seed, args.n)
    long_path, surv_path = write_simulated(cfg, args.out_prefix)
    print(f"wrote {long_path} and {surv_path} (n={cfg.n}, seed={cfg.seed})")
    return 0


def cmd_fit(args, force_se: bool = False) -> int:
    cfg = _config(args.config)
    ds = ingest(args.long, args.surv, cfg.model, args.drop_post_event)
    log.info("ingested %r", ds)
    fit = em_fit(ds, cfg.em)
    se = None
    if cfg.se or force_se:
        if not fit.converged:
            raise ModelError(f"EM did not converge in {fit.iterations} iterations; "
                             "standard errors need a converged fit")
        se = standard_errors(fit, ds)
    report = build_report(ds, fit, se, cfg, include_timing=not args.omit_timing)
    if args.out:
        Path(args.out).write_text(dumps_report(report))
    print(format_table(report))
    if not fit.converged:
        print(f"warning: EM stopped at max_iter={cfg.em.max_iter} without converging",
              file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    import json

    cfg = _config(args.config)
    plan_kw = dict(cfg.bench)
    if args.plan:
        try:
            plan_kw.update(json.loads(Path(args.plan).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read plan {args.plan}: {exc}") from None
    if args.sizes:
        plan_kw["sample_sizes"] = args.sizes
    if args.budget is not None:
        plan_kw["time_budget"] = args.budget
    if args.methods:
        plan_kw["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.repetitions is not None:
        plan_kw["repetitions"] = args.repetitions
    try:
        plan = BenchPlan(**plan_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bench plan: {exc}") from None
    result = run_bench(plan, cfg.sim_config())
    if args.out:
        Path(args.out).write_text(result.to_csv())
    print(result.summary())
    return 0


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command in ("fit", "se"):
            return cmd_fit(args, force_se=args.command == "se")
        return cmd_bench(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, ScanError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
