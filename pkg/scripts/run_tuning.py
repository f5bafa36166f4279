"""Cross-validated choice of the modifier weight over a lambda grid."""
import argparse
import logging
from pathlib import Path

from asdesign.reports import TUNING_COLS, write_csv, write_json
from asdesign.study import StudyConfig, tune_lambda


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--out", default="results/tuning")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = StudyConfig.from_json(Path(args.config).read_text()) if args.config else StudyConfig()
    res = tune_lambda(cfg, progress=lambda r: logging.info("replication %d done", r))
    out = Path(args.out)
    write_csv(out / "tuning.csv", res["rows"], TUNING_COLS)
    write_json(out / "tuning_result.json", res)
    for r in res["rows"]:
        mark = "*" if r["chosen"] else " "
        print(f"{mark} lambda={r['lambda']:<6g} cv_rmse={r['cv_rmse']:.4f} masmd={r['masmd']:.4f}")


if __name__ == "__main__":
    main()
