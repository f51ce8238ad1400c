"""Render the desk dataset (if missing) and run the full ablation grid on it.

    python3 scripts/run_desk_ablation.py --data data/desk --out runs/desk --results results.csv

Extra ``--key value`` pairs are passed through as config overrides, e.g. ``--seeds [0]``.
"""
import argparse
import sys
from pathlib import Path

from seldlab.cli import main
from seldlab.config import PRESETS

GRID = Path(__file__).parent / "grids" / "ablation.csv"


def run() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default="data/desk")
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--results", default="results/desk_ablation.csv")
    p.add_argument("--grid", default=str(GRID))
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    args, extra = p.parse_known_args()
    if not (Path(args.data) / "manifest.json").exists():
        code = main(["synth", "--clips", str(PRESETS["desk"]["clips"]), "--seed", str(args.seed),
                     "--out", args.data])
        if code:
            return code
        main(["extract", "--data", args.data])
    return main(["-v", "ablate", "--preset", "desk", "--data", args.data, "--out", args.out,
                 "--grid", args.grid, "--results", args.results, *extra])


if __name__ == "__main__":
    sys.exit(run())
