#!/usr/bin/env python3
"""Walk through the analysis half of the toolkit: train a miniature network,
capture per-layer activations, compute the pairwise CKA similarity matrix,
and partition the layer sequence with the exact dynamic program.
"""

import numpy as np

from sglp import (
    brute_force_segment,
    build_network,
    fisher_segment,
    forward,
    make_blobs,
    row_sums,
    similarity_matrix,
    train,
)
from sglp.toynet import NetworkSpec

rng_seed = 7

print("=== 1. a pretrained miniature network ===")
spec = NetworkSpec(input_dim=2, hidden_width=8, hidden_layers=10, classes=4, residual=True, seed=rng_seed)
x, y = make_blobs(n_per_class=300, classes=4, dim=2, spread=1.0, seed=114)
net = build_network(spec)
net, history = train(net, x, y, epochs=30, lr=0.05, batch_size=64, seed=rng_seed)
print(f"trained {spec.hidden_layers} hidden units, final train accuracy {history[-1].accuracy:.3f}")

print()
print("=== 2. capture activations and compute layer similarity ===")
_, activations = forward(net, x[:256], capture=True)
matrix = similarity_matrix(activations)
print(f"similarity matrix is {len(matrix)}x{len(matrix)}, symmetric, unit diagonal")
print("rendered (x10, rounded):")
for row in matrix.values:
    print("  " + " ".join(f"{v * 10:4.1f}" for v in row))

print()
print("=== 3. row sums give one ordinate per layer ===")
sums = row_sums(matrix)
print("row sums:", np.round(sums, 3))

print()
print("=== 4. exact minimum-variance segmentation ===")
for k in (2, 3, 4):
    seg = fisher_segment(sums, k, layer_names=matrix.layer_names)
    oracle = brute_force_segment(sums, k)
    agree = "matches" if oracle.split_starts == seg.split_starts and oracle.loss == seg.loss else "DIFFERS!"
    groups = [
        [matrix.layer_names[i] for i in range(start, stop + 1)] for start, stop in seg.bounds()
    ]
    print(f"k={k}: loss={seg.loss:.6f} (brute force {agree})")
    for g, names in enumerate(groups):
        print(f"  segment {g}: {', '.join(names)}")
