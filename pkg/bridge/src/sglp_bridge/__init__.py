"""PyTorch bridge for the sglp planner: exports activation dumps (ACTV1) and
gradient-norm score tables in the planner's wire formats. Selection logic
lives only in the planner; this package never decides what to prune.
"""

from .export import export_activations, export_scores, synthetic_batch
from .formats import (
    BridgeError,
    SegmentLayout,
    apportion_budget,
    enumerate_masks,
    read_segmentation,
    resolve_budget,
)
from .taps import TapSpec, capture_activations, match_taps

__version__ = "0.1.0"
