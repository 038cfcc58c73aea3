"""Fit u1 with the acceptance settings and write samples and a density grid.

Equivalent CLI call::

    ddnf fit --kind energy-u1 --hidden 8,8 --zero-init --lr 3e-3 --iterations 2000 --out runs/u1
"""

import argparse
from pathlib import Path

from ddnf import cli


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--target", choices=["u1", "u2"], default="u1")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/toy"))
    args = p.parse_args()
    return cli.main(["fit", "--kind", f"energy-{args.target}", "--hidden", "8,8", "--zero-init",
                     "--lr", "3e-3", "--iterations", str(args.iterations), "--eval-every", "250",
                     "--seed", str(args.seed), "--out", str(args.out)])


if __name__ == "__main__":
    raise SystemExit(main())
