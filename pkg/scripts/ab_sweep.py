"""AB BiLSTM over the six reference (alpha, beta) pairs at every horizon.

    python3 scripts/ab_sweep.py [--workers N] [--out DIR] [--seeds 5]
"""

import argparse
import os
import sys

from bayes_msa.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/ab_sweep")
    p.add_argument("--seeds", default="5")
    p.add_argument("--workers", default="1")
    a = p.parse_args()
    sys.exit(main(["compare", os.path.join(HERE, "configs", "desk.json"), "--cells", "bilstm",
                   "--ab-sweep", "--out", a.out, "--seeds", a.seeds, "--workers", a.workers]))
