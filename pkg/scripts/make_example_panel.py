"""Write a synthetic weekly geo panel CSV that ``asdesign design`` can read."""
import argparse

from asdesign.core_data import DgpConfig, generate_synthetic, synthetic_panel, write_geo_panel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="destination CSV")
    ap.add_argument("--n-geos", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    dgp = DgpConfig(n_geos=args.n_geos, seed=args.seed)
    write_geo_panel(synthetic_panel(generate_synthetic(dgp), dgp), args.out)


if __name__ == "__main__":
    main()
