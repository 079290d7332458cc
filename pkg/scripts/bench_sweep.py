"""MAP timing sweep over (D, T) through the command-line bench.

Writes the usual bench outputs into ``--out`` and prints the per-cell mean
seconds per optimizer iteration as a D by T grid.

    python3 scripts/bench_sweep.py --out runs/bench --D 3 10 30 --T 100 300 600
"""

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from mlndlm.cli import main as cli_main
from mlndlm.fileio import read_table


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--D", type=int, nargs="+", default=[3, 10, 30])
    ap.add_argument("--T", type=int, nargs="+", default=[100, 300, 600])
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args(argv)

    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump({"bench": {"D": args.D, "T": args.T, "reps": args.reps, "seed": args.seed}}, fh)
        cfg = fh.name
    try:
        code = cli_main(["bench", "-c", cfg, "-o", args.out] + (["--force"] if args.force else []))
    finally:
        os.unlink(cfg)
    if code != 0:
        sys.exit(code)

    _, cols = read_table(os.path.join(args.out, "bench_summary.csv"))
    grid = {(int(d), int(t)): s for d, t, s in zip(cols["D"], cols["T"], cols["sec_per_iter_mean"])}
    Ts = sorted({t for _, t in grid})
    print("sec/iter  " + "".join(f"T={t:<10d}" for t in Ts))
    for d in sorted({d for d, _ in grid}):
        print(f"D={d:<7d} " + "".join(f"{grid.get((d, t), np.nan):<12.3e}" for t in Ts))


if __name__ == "__main__":
    main()
