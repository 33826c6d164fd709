"""Method comparison: RNN/LSTM/BiLSTM, deterministic vs KL vs AB, over horizons and seeds.

    python3 scripts/run_table.py [--workers N] [--out DIR] [--seeds 5]
"""

import argparse
import os
import sys

from bayes_msa.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/table")
    p.add_argument("--seeds", default="5")
    p.add_argument("--workers", default="1")
    a = p.parse_args()
    sys.exit(main(["compare", os.path.join(HERE, "configs", "desk.json"), "--out", a.out,
                   "--seeds", a.seeds, "--workers", a.workers]))
