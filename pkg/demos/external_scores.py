#!/usr/bin/env python3
"""The file-based route: every stage boundary is an auditable on-disk format,
so external tooling (a different framework, a perplexity scorer, anything)
can produce activations and candidate scores for the planner to consume.
"""

import tempfile
from pathlib import Path

import numpy as np

from sglp import (
    TableScorer,
    fisher_segment,
    plan,
    row_sums,
    similarity_matrix,
)
from sglp.io import (
    ActivationSet,
    ScoreRecord,
    ScoreTable,
    read_activations_file,
    read_score_table_file,
    write_activations_file,
    write_score_table_file,
)
from sglp.planner import enumerate_masks

workdir = Path(tempfile.mkdtemp(prefix="sglp_demo_"))
print(f"working in {workdir}")

print()
print("=== 1. some external system dumps activations (ACTV1 binary) ===")
rng = np.random.Generator(np.random.Philox(42))
base = rng.standard_normal((64, 6))
layers = []
for i in range(6):
    # drift the representation so neighbours are similar, distant layers not
    base = base @ rng.standard_normal((6, 6)) * 0.25 + base
    layers.append(base.copy())
acts = ActivationSet.from_matrices([f"block{i}" for i in range(6)], layers)
acts_path = workdir / "activations.actv"
byte_count = write_activations_file(acts, acts_path)
print(f"wrote {byte_count} bytes, {len(acts)} layers, n={acts.n_samples}")

print()
print("=== 2. this toolkit analyzes them ===")
back = read_activations_file(acts_path)
matrix = similarity_matrix(back)
segmentation = fisher_segment(row_sums(matrix), 3, layer_names=matrix.layer_names)
print(f"segments: {segmentation.bounds()} loss={segmentation.loss:.5f}")

print()
print("=== 3. the external system scores every candidate (TSV) ===")
records = []
for index, size in enumerate(segmentation.sizes()):
    for mask in enumerate_masks(size):
        # stand-in for a real criterion: prefer keeping later layers
        score = sum(p * 1.5 + 1.0 for p in range(size) if mask >> p & 1)
        records.append(ScoreRecord(index, mask, score))
scores_path = workdir / "scores.tsv"
write_score_table_file(ScoreTable(tuple(records)), scores_path)
print(f"wrote {len(records)} records to {scores_path.name}")
print("first lines:")
for line in scores_path.read_text().splitlines()[:4]:
    print(f"  {line}")

print()
print("=== 4. the planner selects within each segment ===")
table = read_score_table_file(scores_path)
result = plan(TableScorer(table), segmentation, budget=4, seed=0)
print(f"kept:    {list(result.kept)}")
print(f"removed: {list(result.removed)}")
for choice in result.per_segment:
    print(
        f"  segment {choice.segment_index}: mask {choice.keep_mask:b}, "
        f"score {choice.best_score:.2f}, {choice.candidates_evaluated} candidates"
    )
