"""Eval-mode throughput of the (N=2, M=8, P, LN) model against the GRU baseline.

    python3 scripts/bench.py [--batches 100] [--batch-size 32] [--mode both]

Prints the JSON report from ``seldlab bench``; pass ``--mhsa``/``--gru`` to time checkpoints.
"""
import sys

from seldlab.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench", *sys.argv[1:]]))
