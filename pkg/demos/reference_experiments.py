#!/usr/bin/env python3
"""Reproduce the three built-in desk-scale experiments on the reference task:
planned-vs-random baselines, stability of the segment count k, and the
accuracy-versus-depth curve.
"""

import tempfile
from pathlib import Path

from sglp.pipeline import baseline_compare, depth_sweep, k_sweep
from sglp.reference import reference_config

workdir = Path(tempfile.mkdtemp(prefix="sglp_ref_"))
print(f"artifacts under {workdir}")

print()
print("=== planned run vs 10 random plans (same budget, same fine-tuning) ===")
report = baseline_compare(reference_config(str(workdir / "baseline")), trials=10)
planned = report.rows[0]
print(f"unpruned accuracy:     {planned['pre_prune_accuracy']:.4f}")
print(f"planned, pruned+tuned: {report.summary['sglp_accuracy']:.4f}  (kept {planned['plan']['kept']})")
print(
    f"random plans:          mean {report.summary['random_mean']:.4f}, "
    f"min {report.summary['random_min']:.4f}, max {report.summary['random_max']:.4f}"
)

print()
print("=== k-stability: same 8 kept layers under different segment counts ===")
report = k_sweep(reference_config(str(workdir / "k_sweep")), [2, 3, 4, 5], fixed_total_kept=8)
for k, acc in report.summary["accuracy_by_k"].items():
    print(f"  k={k}: accuracy {acc:.4f}")
print(f"spread: {report.summary['spread']:.4f}")

print()
print("=== depth sweep: accuracy and parameters vs kept-layer total ===")
report = depth_sweep(reference_config(str(workdir / "depth")), [4, 6, 8, 10, 12])
for total in (4, 6, 8, 10, 12):
    acc = report.summary["accuracy_by_total"][str(total)]
    params = report.summary["params_by_total"][str(total)]
    print(f"  keep {total:2d}: accuracy {acc:.4f}, {params} parameters")
print(f"unpruned accuracy: {report.summary['unpruned_accuracy']:.4f}")
