"""The fixed reference task used by the built-in experiments and acceptance runs.

A 12-unit residual network on 2-D, 4-class Gaussian blob data. The numbers
here are frozen so results are stable across machines; change them and
every downstream expectation moves.
"""

from __future__ import annotations

from .pipeline import PipelineConfig, Seeds, ToySource, TrainParams

REFERENCE_SEEDS = Seeds(build=2024, data=114, score=11, finetune=23)

REFERENCE_SOURCE = ToySource(
    input_dim=2,
    hidden_width=8,
    hidden_layers=12,
    classes=4,
    residual=True,
    n_train_per_class=500,
    n_test_per_class=250,
    spread=1.1,
    pretrain=TrainParams(epochs=40, lr=0.05, batch_size=64),
    score_batch=256,
)


def reference_config(out_dir: str, k: int = 4, budget: int | None = 8, mode: str = "literal") -> PipelineConfig:
    """The canonical desk-scale configuration: L=12, k=4, 8 kept layers."""
    return PipelineConfig(
        source=REFERENCE_SOURCE,
        k=k,
        budget=budget,
        mode=mode,
        seeds=REFERENCE_SEEDS,
        out_dir=out_dir,
    )
