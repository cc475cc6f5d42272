#!/usr/bin/env python3
"""Walk through the selection half: score keep masks segment by segment with
the gradient-norm criterion, pick the argmax plan, physically prune, and
fine-tune the compact network.
"""

import numpy as np

from sglp import (
    ToyGradNormScorer,
    build_network,
    fisher_segment,
    forward,
    make_blobs,
    plan,
    prune,
    row_sums,
    similarity_matrix,
    train,
)
from sglp.toynet import NetworkSpec, accuracy

print("=== setup: pretrained 8-unit residual network ===")
spec = NetworkSpec(input_dim=2, hidden_width=8, hidden_layers=8, classes=3, residual=True, seed=3)
x, y = make_blobs(n_per_class=400, classes=3, dim=2, spread=1.0, seed=66)
train_x, train_y = x[:900], y[:900]
test_x, test_y = x[900:], y[900:]
net = build_network(spec)
net, _ = train(net, train_x, train_y, epochs=30, lr=0.05, batch_size=64, seed=3)
print(f"pretrained accuracy: {accuracy(net, test_x, test_y):.3f} ({net.param_count} parameters)")

print()
print("=== segment, then search each segment independently ===")
_, activations = forward(net, train_x[:256], capture=True)
matrix = similarity_matrix(activations)
segmentation = fisher_segment(row_sums(matrix), 3, layer_names=matrix.layer_names)
print(f"segments: {segmentation.bounds()} (sizes {segmentation.sizes()})")

scorer = ToyGradNormScorer(
    network=net,
    batch=train_x[:256],
    labels=train_y[:256],
    segmentation=segmentation,
    mode="literal",
    seed=11,
)
result = plan(scorer, segmentation, budget=5, mode="literal", seed=11)
print(f"budget 5 of {segmentation.length} layers, {sum(c.candidates_evaluated for c in result.per_segment)} candidates scored")
for choice in result.per_segment:
    ranked = sorted(choice.candidate_scores, key=lambda ms: -ms[1])
    shown = ", ".join(f"{m:0{segmentation.sizes()[choice.segment_index]}b}:{s:.3f}" for m, s in ranked[:3])
    print(f"  segment {choice.segment_index}: best mask {choice.keep_mask:b} (top candidates {shown})")
print(f"kept layers:    {list(result.kept)}")
print(f"removed layers: {list(result.removed)}")

print()
print("=== prune and fine-tune ===")
pruned = prune(net, result.kept)
print(f"pruned to {pruned.hidden_layers} units ({pruned.param_count} parameters)")
print(f"accuracy after pruning, before tuning: {accuracy(pruned, test_x, test_y):.3f}")
tuned, _ = train(pruned, train_x, train_y, epochs=8, lr=0.05, batch_size=64, seed=5)
print(f"accuracy after fine-tuning:            {accuracy(tuned, test_x, test_y):.3f}")
print(f"(unpruned reference:                   {accuracy(net, test_x, test_y):.3f})")
