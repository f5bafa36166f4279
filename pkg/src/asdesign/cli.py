"""Command-line entry point: ``asdesign {design,simulate,tune,power,bench,report}``.

Every subcommand exits 0 on success. On failure it prints a one-line JSON
object ``{"error": <kind>, "message": <text>}`` to stderr and exits nonzero
(2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .core_data import load_geo_panel
from .design import asd_design, panel_covariates
from .reports import (
    DESIGN_COLS, POWER_COLS, REPLICATION_COLS, RESULTS_COLS, RUNTIME_COLS, TEST_COLS, TUNING_COLS,
    dump_design, emit_reports, load_report, write_csv, write_json, write_power_charts,
)
from .study import SimReport, StudyConfig, run_power_grid, run_scalability, run_study, tune_lambda


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON file mirroring StudyConfig")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--seed", type=int, help="master seed override")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="asdesign", description="Adaptive supergeo experiment design toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("design", help="design an experiment for a geo panel CSV")
    p.add_argument("panel")
    _add_common(p)

    p = sub.add_parser("simulate", help="Monte-Carlo comparison of TM, SG and ASD")
    _add_common(p)
    p.add_argument("--replications", type=int)
    p.add_argument("--n-geos", type=int)

    p = sub.add_parser("tune", help="cross-validate the modifier weight")
    _add_common(p)

    p = sub.add_parser("power", help="empirical power grid")
    _add_common(p)

    p = sub.add_parser("bench", help="runtime scaling and exact-solver cutoff")
    _add_common(p)

    p = sub.add_parser("report", help="re-emit every table and chart from saved results")
    p.add_argument("--input", required=True, help="directory holding saved results")
    p.add_argument("--out", help="destination (default: the input directory)")
    return ap


def load_config(args) -> StudyConfig:
    cfg = StudyConfig()
    if getattr(args, "config", None):
        cfg = StudyConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["master_seed"] = args.seed
    if getattr(args, "replications", None) is not None:
        changes["replications"] = args.replications
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    if getattr(args, "n_geos", None) is not None:
        changes["dgp"] = dataclasses.replace(cfg.dgp, n_geos=args.n_geos)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _save(out: Path, name: str, report: SimReport):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(report.to_json() + "\n", encoding="utf-8")


def cmd_design(args) -> dict:
    cfg = load_config(args)
    panel = load_geo_panel(args.panel)
    cov = panel_covariates(panel, lambdas=cfg.lambdas, default_lambda=cfg.default_lambda)
    run = asd_design(panel, cfg.design_config(cfg.master_seed), cov)
    out = Path(cfg.output_dir)
    files = dump_design(run, panel, cov, out)
    a = run.assignment
    return {"status": a.status, "cost": a.cost, "n_supergeos": a.partition.n_supergeos,
            "files": [str(f) for f in files]}


def cmd_simulate(args) -> dict:
    cfg = load_config(args)
    report = run_study(cfg)
    out = Path(cfg.output_dir)
    _save(out, "study.json", report)
    write_csv(out / "results.csv", report.summary, RESULTS_COLS)
    write_csv(out / "replications.csv", report.replications, REPLICATION_COLS)
    write_csv(out / "tests.csv", report.tests, TEST_COLS)
    write_csv(out / "design.csv", report.design, DESIGN_COLS)
    write_json(out / "timings.json", report.timings)
    return {"summary": report.summary, "failures": len(report.failures)}


def cmd_tune(args) -> dict:
    cfg = load_config(args)
    res = tune_lambda(cfg)
    out = Path(cfg.output_dir)
    _save(out, "tuning.json", SimReport(tuning=res["rows"]))
    write_csv(out / "tuning.csv", res["rows"], TUNING_COLS)
    return {"lambda": res["lambda"], "frontier_size": len(res["frontier"])}


def cmd_power(args) -> dict:
    cfg = load_config(args)
    rows = run_power_grid(cfg)
    out = Path(cfg.output_dir)
    _save(out, "power.json", SimReport(power=rows))
    write_csv(out / "power.csv", rows, POWER_COLS)
    write_power_charts(rows, out)
    return {"cells": len(rows)}


def cmd_bench(args) -> dict:
    cfg = load_config(args)
    rows, timing_rows, slope = run_scalability(cfg)
    out = Path(cfg.output_dir)
    _save(out, "bench.json", SimReport(runtime=rows, slope=slope, timings={"runtime": timing_rows}))
    write_csv(out / "runtime.csv", rows, RUNTIME_COLS)
    write_json(out / "runtime_timings.json", {"rows": timing_rows, "loglog_slope": slope})
    return {"loglog_slope": slope, "rows": rows}


def cmd_report(args) -> dict:
    src = Path(args.input)
    if not src.is_dir():
        raise FileNotFoundError(f"no results directory {src}")
    report = load_report(src)
    files = emit_reports(report, Path(args.out) if args.out else src)
    return {"files": [str(f) for f in files]}


COMMANDS = {"design": cmd_design, "simulate": cmd_simulate, "tune": cmd_tune, "power": cmd_power,
            "bench": cmd_bench, "report": cmd_report}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # reported as machine-readable JSON
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps(result, default=str, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
