"""CSV, JSON and SVG emission. Everything written here is byte-stable for equal inputs."""
from __future__ import annotations

import json
import math
import os
from pathlib import Path

import pandas as pd

from .study import SimReport, _plain

RESULTS_COLS = ["method", "n_reps", "mean_estimate", "estimate_ci_lo", "estimate_ci_hi", "rmse",
                "mean_abs_bias", "abs_bias_ci_lo", "abs_bias_ci_hi", "mean_balance"]
REPLICATION_COLS = ["rep", "method", "estimate", "abs_bias", "balance", "status"]
TEST_COLS = ["comparison", "p", "p_corrected", "cohens_d", "label", "test", "statistic", "p_t",
             "p_wilcoxon", "shapiro_p", "diff_ci_lo", "diff_ci_hi"]
POWER_COLS = ["n_geos", "effect_size", "method", "reps", "missing", "power", "wilson_lo", "wilson_hi",
              "category"]
RUNTIME_COLS = ["n_geos", "runs", "asd_status", "asd_cost", "asd_supergeos", "exact_status", "exact_cost"]
DESIGN_COLS = ["geo_id", "supergeo_id", "arm"]
TUNING_COLS = ["lambda", "cv_rmse", "masmd", "on_frontier", "chosen"]
BALANCE_COLS = ["term", "smd", "lambda", "contribution"]


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame([{c: r.get(c) for c in columns} for r in rows], columns=columns)
    df.to_csv(path, index=False, lineterminator="\n")
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def emit_reports(report: SimReport, out_dir) -> list[Path]:
    """Write every table of ``report`` plus one power chart per method.

    Missing parts produce header-only tables. Wall-clock measurements go to
    ``timings.json`` only, so that the CSV files are reproducible byte for byte.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = [
        write_csv(out / "results.csv", report.summary, RESULTS_COLS),
        write_csv(out / "replications.csv", report.replications, REPLICATION_COLS),
        write_csv(out / "tests.csv", report.tests, TEST_COLS),
        write_csv(out / "power.csv", report.power, POWER_COLS),
        write_csv(out / "runtime.csv", report.runtime, RUNTIME_COLS),
        write_csv(out / "design.csv", report.design, DESIGN_COLS),
    ]
    if report.tuning:
        written.append(write_csv(out / "tuning.csv", report.tuning, TUNING_COLS))
    written += write_power_charts(report.power, out)
    if report.timings or report.slope is not None:
        written.append(write_json(out / "timings.json", {**report.timings, "loglog_slope": report.slope}))
    return written


# --- design dumps ---------------------------------------------------------

def dump_design(run, panel, cov, out_dir) -> list[Path]:
    """Embeddings, training trace, candidates, balance breakdown, design and diagnostics."""
    from .balance import design_cost  # local: only needed for the audit line

    out = Path(out_dir)
    ids = list(panel.geo_ids)
    emb = run.embeddings
    emb_rows = [{"geo_id": g, **{f"e{j + 1}": float(v) for j, v in enumerate(row)}} for g, row in zip(ids, emb)]
    files = [write_csv(out / "embeddings.csv", emb_rows, ["geo_id"] + [f"e{j + 1}" for j in range(emb.shape[1])])]
    trace = [dict(zip(["epoch", "contrastive", "regression", "total"], t)) for t in run.trace]
    files.append(write_csv(out / "trace.csv", trace, ["epoch", "contrastive", "regression", "total"]))
    cand_rows = [{"partition_id": p, "supergeo_id": s, "geo_id": ids[g]}
                 for p, part in enumerate(run.candidates) for s, members in enumerate(part.supergeos)
                 for g in members]
    files.append(write_csv(out / "candidates.csv", cand_rows, ["partition_id", "supergeo_id", "geo_id"]))
    a = run.assignment
    files.append(write_csv(out / "balance.csv", a.breakdown, BALANCE_COLS))
    arms = a.geo_arms()
    labels = a.partition.labels()
    files.append(write_csv(out / "design.csv",
                           [{"geo_id": g, "supergeo_id": int(labels[i]), "arm": "T" if arms[i] else "C"} for i, g in enumerate(ids)],
                           DESIGN_COLS))
    audit, _ = design_cost(a.partition, a.arms, cov)
    diag = {**a.diagnostics(), "audit_cost": audit, "timings_s": run.timings}
    files.append(write_json(out / "diagnostics.json", diag))
    return files


# --- svg ------------------------------------------------------------------

_W, _H, _PAD = 480, 320, 48
_COLOURS = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d"]


def _f(x: float) -> str:
    return f"{x:.2f}"


def power_chart_svg(rows, method: str) -> str:
    """Power against N, one line per effect size, Wilson band shaded, 0.8 reference line."""
    rows = [r for r in rows if r["method"] == method and not _isnan(r["power"])]
    sizes = sorted({r["n_geos"] for r in rows}) or [0, 1]
    lo_n, hi_n = min(sizes), max(sizes)
    span = (hi_n - lo_n) or 1

    def sx(n):
        return _PAD + (n - lo_n) / span * (_W - 2 * _PAD)

    def sy(p):
        return _H - _PAD - p * (_H - 2 * _PAD)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
             f'<title>power vs sample size: {method}</title>',
             f'<line x1="{_PAD}" y1="{_f(sy(0))}" x2="{_W - _PAD}" y2="{_f(sy(0))}" stroke="black"/>',
             f'<line x1="{_PAD}" y1="{_f(sy(0))}" x2="{_PAD}" y2="{_f(sy(1))}" stroke="black"/>',
             f'<line x1="{_PAD}" y1="{_f(sy(0.8))}" x2="{_W - _PAD}" y2="{_f(sy(0.8))}" '
             f'stroke="grey" stroke-dasharray="4 3"/>']
    for n in sizes:
        parts.append(f'<text x="{_f(sx(n))}" y="{_H - _PAD + 16}" font-size="10" text-anchor="middle">{n}</text>')
    for p in (0.0, 0.5, 0.8, 1.0):
        parts.append(f'<text x="{_PAD - 6}" y="{_f(sy(p) + 3)}" font-size="10" text-anchor="end">{p:.1f}</text>')
    effects = sorted({r["effect_size"] for r in rows})
    for k, d in enumerate(effects):
        col = _COLOURS[k % len(_COLOURS)]
        pts = sorted((r for r in rows if r["effect_size"] == d), key=lambda r: r["n_geos"])
        upper = " ".join(f"{_f(sx(r['n_geos']))},{_f(sy(r['wilson_hi']))}" for r in pts)
        lower = " ".join(f"{_f(sx(r['n_geos']))},{_f(sy(r['wilson_lo']))}" for r in reversed(pts))
        parts.append(f'<polygon points="{upper} {lower}" fill="{col}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{_f(sx(r['n_geos']))},{_f(sy(r['power']))}" for r in pts)
        parts.append(f'<polyline points="{line}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        parts.append(f'<text x="{_W - _PAD + 4}" y="{_PAD + 12 * k}" font-size="10" fill="{col}">d={d:g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _isnan(x) -> bool:
    return isinstance(x, float) and math.isnan(x)


def write_power_charts(rows, out_dir) -> list[Path]:
    out = Path(out_dir)
    files = []
    for method in sorted({r["method"] for r in rows}):
        path = out / f"power_{method}.svg"
        path.write_text(power_chart_svg(rows, method), encoding="utf-8")
        files.append(path)
    return files


def load_report(out_dir) -> SimReport:
    """Merge whatever partial report files exist in ``out_dir``."""
    report = SimReport()
    for name in ("study.json", "tuning.json", "power.json", "bench.json"):
        path = os.path.join(out_dir, name)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                report = report.merge(SimReport.from_json(fh.read()))
    return report
