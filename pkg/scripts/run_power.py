"""Empirical power grid (sample size x standardised effect x method) with Wilson bands."""
import argparse
import dataclasses
import logging
from pathlib import Path

from asdesign.reports import POWER_COLS, write_csv, write_power_charts
from asdesign.study import SimReport, StudyConfig, run_power_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--sizes", type=int, nargs="+", help="override power_sizes, e.g. --sizes 50")
    ap.add_argument("--reps", type=int)
    ap.add_argument("--out", default="results/power")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = StudyConfig.from_json(Path(args.config).read_text()) if args.config else StudyConfig()
    changes = {}
    if args.sizes:
        changes["power_sizes"] = args.sizes
    if args.reps:
        changes["power_reps"] = args.reps
    cfg = dataclasses.replace(cfg, **changes)
    rows = run_power_grid(cfg, progress=lambda nr: logging.info("n=%d rep %d done", *nr))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "power.json").write_text(SimReport(power=rows).to_json() + "\n")
    write_csv(out / "power.csv", rows, POWER_COLS)
    write_power_charts(rows, out)
    for r in rows:
        print(f"{r['n_geos']:5d} {r['method']:4s} d={r['effect_size']:<5g} power={r['power']:.2f} "
              f"[{r['wilson_lo']:.2f}, {r['wilson_hi']:.2f}] {r['category']}")


if __name__ == "__main__":
    main()
