"""Full AUC/SDR tables over every noise type and SNR.

Trains the EFTW-RBM and FTW-RBM variants (plus the untrained model and the
ideal-mask oracle for reference) per (noise, SNR) cell and writes
auc.csv, sdr.csv, tables.txt and detail.jsonl into the output directory.
Nine cells with three trained or untrained models each; expect well over
ten minutes on one CPU core.

    python3 scripts/run_benchmark.py --out bench [--epochs 40]
"""

import sys

from eftwrbm.cli import main

if __name__ == "__main__":
    args = sys.argv[1:] or ["--out", "bench"]
    grid = ["--noise", "babble,white,pink", "--snr=-5,0,5"]
    sys.exit(main(["eval", *grid, "--set", "variants=EFTW-RBM,FTW-RBM,untrained,oracle", *args]))
