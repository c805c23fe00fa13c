"""Command line entry point: ``run``, ``compare`` and ``report``."""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from .experiment import (
    ConfigError,
    emit_report,
    final_group_table,
    load_config,
    markdown_table,
    plot_data,
    run_experiment,
    csv_text,
)

log = logging.getLogger("cldistill")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cldistill", description="Continual-learning distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every method/grid/seed cell of a config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    run.add_argument("--method", choices=["ft", "lwf", "wa", "full"])
    run.add_argument("--no-rp", action="store_true")
    run.add_argument("--no-sh", action="store_true")
    run.add_argument("--no-wa", action="store_true")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
    run.add_argument("--force", action="store_true", help="allow grids above the run cap")
    run.add_argument("--no-cache", action="store_true")

    cmp = sub.add_parser("compare", help="final-period group table for two or more methods")
    cmp.add_argument("--config", required=True)
    cmp.add_argument("--out", help="keep run artifacts and plot data here")
    cmp.add_argument("--jobs", type=int, default=1)
    cmp.add_argument("--no-cache", action="store_true")

    rep = sub.add_parser("report", help="render a results directory")
    rep.add_argument("results")
    rep.add_argument("--format", choices=["md", "csv", "png-data"], default="md")
    return p


def _prepare_out(out: Path, overwrite: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)


def cmd_run(args) -> int:
    exp = load_config(args.config)
    if args.seed is not None:
        exp.seeds = [args.seed]
    if args.method:
        exp.methods = [args.method]
    for flag in ("rp", "sh", "wa"):
        if getattr(args, f"no_{flag}"):
            exp.toggles[flag] = False
    if exp.ablation and exp.toggles:
        raise ConfigError("toggle flags cannot be combined with an ablation config")
    out = Path(args.out)
    _prepare_out(out, args.overwrite)
    doc = run_experiment(exp, out, jobs=args.jobs, force=args.force, use_cache=not args.no_cache)
    print(f"wrote {len(doc['runs'])} run(s) to {out}")
    return 0


def cmd_compare(args) -> int:
    exp = load_config(args.config)
    if len(exp.methods) < 2 or exp.ablation:
        raise ConfigError("compare needs a config listing at least two methods")
    tmp = None
    if args.out:
        out = Path(args.out)
        _prepare_out(out, overwrite=True)
    else:
        tmp = tempfile.mkdtemp(prefix="cldistill-compare-")
        out = Path(tmp)
    try:
        doc = run_experiment(exp, out, jobs=args.jobs, use_cache=not args.no_cache)
        sys.stdout.write(markdown_table(doc))
        if args.out:
            (out / "plot_data.csv").write_text(csv_text(plot_data(doc), ["run", "group", "t", "acc"]), encoding="utf-8")
            (out / "comparison.csv").write_text(
                csv_text(final_group_table(doc), ["run", "group", "metric", "mean", "min", "max", "seeds"]),
                encoding="utf-8",
            )
    finally:
        if tmp:
            shutil.rmtree(tmp, ignore_errors=True)
    return 0


def cmd_report(args) -> int:
    path = emit_report(args.results, args.format)
    print(path)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = {"run": cmd_run, "compare": cmd_compare, "report": cmd_report}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure; partial outputs stay on disk
        log.exception("run failed")
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
