"""Plot a ``results.csv`` written by ``gencap experiment``.

    python scripts/plot_results.py runs/hidden/results.csv [out.png]

Left panel: margin-normalized measures against the sweep variable, one line
per variant, averaged over seeds. Right panel: train and test error. Needs
matplotlib, which the package itself does not depend on.
"""
import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

MEASURES = ("norm_l2_product", "norm_l1_path", "norm_l2_path_sq", "norm_spectral_product")


def main(path, out=None):
    with open(path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["status"] == "ok"]
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        groups[r["variant"] or r["kind"]][int(r["sweep_value"])].append(r)

    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
    for variant, by_value in groups.items():
        xs = sorted(by_value)
        for col in MEASURES:
            ys = [np.mean([float(r[col]) for r in by_value[x]]) for x in xs]
            left.plot(xs, np.asarray(ys) / ys[0], marker="o", label=f"{col[5:]} ({variant})")
        for col, style in (("train_error", "--"), ("test_error", "-")):
            right.plot(xs, [np.mean([float(r[col]) for r in by_value[x]]) for x in xs], style, marker="o", label=f"{col} ({variant})")
    left.set_yscale("log")
    left.set_ylabel("normalized measure / first value")
    right.set_ylabel("error")
    for ax in (left, right):
        ax.set_xlabel(rows[0]["kind"] if rows else "")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out or path.replace(".csv", ".png"), dpi=120)


if __name__ == "__main__":
    main(*sys.argv[1:3])
