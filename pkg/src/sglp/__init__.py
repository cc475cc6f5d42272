"""Segment-guided layer-pruning planner.

Pipeline: capture per-layer activations, compute the pairwise CKA
similarity matrix, partition the layer sequence into contiguous segments by
exact minimum-variance dynamic programming, then search keep masks within
each segment by gradient-norm scoring (or an external score table) to
produce an auditable pruning plan.
"""

from .cka import SimilarityMatrix, center_gram, cka_pair, cka_pair_gram, similarity_matrix
from .errors import DataError, FormatError, SglpError, StageError
from .io import (
    ActivationSet,
    LayerActivations,
    ScoreRecord,
    ScoreTable,
    read_activations,
    read_score_table,
    read_similarity,
    write_activations,
    write_score_table,
    write_similarity,
)
from .planner import (
    PruningPlan,
    SegmentChoice,
    TableScorer,
    ToyGradNormScorer,
    apportion_budget,
    candidate_count,
    enumerate_masks,
    plan,
    plan_from_json,
    plan_to_json,
    random_plan,
)
from .pipeline import (
    ExperimentReport,
    FileSource,
    PipelineConfig,
    Seeds,
    ToySource,
    TrainParams,
    baseline_compare,
    depth_sweep,
    k_sweep,
    replan,
    run,
)
from .segmentation import (
    DiameterTable,
    Segmentation,
    brute_force_segment,
    count_segmentations,
    diameter,
    diameter_table,
    fisher_segment,
    row_sums,
    segmentation_from_json,
    segmentation_to_json,
)
from .toynet import (
    GradientSet,
    Network,
    NetworkSpec,
    backward,
    build_network,
    forward,
    grad_norm,
    hybrid_init,
    loss,
    make_blobs,
    prune,
    train,
)

__version__ = "0.1.0"
