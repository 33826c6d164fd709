"""AB BiLSTM accuracy as the forecast horizon grows (H = 1, 12, 24, 48).

    python3 scripts/horizon_sweep.py [--workers N] [--out DIR] [--seeds 5]
"""

import argparse
import os
import sys

from bayes_msa.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/horizons")
    p.add_argument("--seeds", default="5")
    p.add_argument("--workers", default="1")
    a = p.parse_args()
    sys.exit(main(["compare", os.path.join(HERE, "configs", "desk.json"), "--cells", "bilstm",
                   "--modes", "ab", "--horizons", "1", "12", "24", "48", "--out", a.out,
                   "--seeds", a.seeds, "--workers", a.workers]))
