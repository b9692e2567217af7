"""
Sweep summaries as tables
=========================

Prints every ``<kind>_summary.csv`` found in a sweep output directory, one
table per kind with mean +/- std across seeds.

    synthkd sweep --kind fidelity --denoiser dn.ckpt --teacher t.ckpt --out-dir runs
    synthkd sweep --kind labels   --denoiser dn.ckpt --teacher t.ckpt --out-dir runs
    python3 demos/trend_report.py runs
"""

import csv
import sys
from pathlib import Path

from synthkd.sweep import AXES, METRICS

root = Path(sys.argv[1] if len(sys.argv) > 1 else ".")
found = sorted(root.glob("*_summary.csv"))
if not found:
    sys.exit(f"no *_summary.csv under {root}")

for path in found:
    rows = list(csv.DictReader(open(path, newline="")))
    kind = rows[0]["kind"]
    metrics = [m for m in METRICS if rows[0].get(f"{m}_mean")]
    print(f"\n{kind} ({rows[0]['n_seeds']} seeds)")
    header = [*AXES[kind], *metrics]
    widths = [max(len(h), 15) for h in header]
    print("  " + "  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for r in rows:
        cells = [r[a] for a in AXES[kind]]
        cells += [f"{float(r[m + '_mean']):.4f}+/-{float(r[m + '_std']):.4f}" for m in metrics]
        print("  " + "  ".join(c.rjust(w) for c, w in zip(cells, widths)))
