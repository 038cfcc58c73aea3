"""Write the synthetic beta-binomial dataset shipped with the package.

Counts are drawn at known (m, L) = (0.005, 1500) with 20 records whose
population sizes are log-uniform on [1e3, 1e5].
"""

import argparse

from ddnf.targets import default_synthetic_path, synthetic_betabinom, write_counts_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--m", type=float, default=0.005)
    p.add_argument("--L", type=float, default=1500.0)
    p.add_argument("--records", type=int, default=20)
    p.add_argument("--seed", type=int, default=2019)
    p.add_argument("--out", default=str(default_synthetic_path()))
    args = p.parse_args()
    n, y = synthetic_betabinom(args.m, args.L, args.records, seed=args.seed)
    write_counts_csv(args.out, n, y)
    print(f"wrote {args.records} records to {args.out}")


if __name__ == "__main__":
    main()
