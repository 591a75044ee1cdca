"""Temporal coherency toolkit for video segmentation.

Builds synthetic perturbation benchmarks with exact ground-truth flow,
scores prediction sequences with the stability rate, and evaluates
boundary and global coherency losses with analytic gradients so external
trainers can plug them in.
"""

__version__ = "0.1.0"

from .core import (
    BinaryMask,
    CorrespondenceSet,
    FlowField,
    Image,
    LabelMap,
    LossConfig,
    SoftmaxMap,
    argmax_labels,
)
from .flow import (
    FlowParams,
    compute_flow,
    forward_backward_check,
    warp_image,
    warp_labels,
    warp_map,
)
from .losses import (
    FramePair,
    LossReport,
    PairLoss,
    boundary_coherency,
    confident_disagreement_set,
    global_coherency,
    lovasz_softmax,
    seg_loss,
    total_loss,
)
from .metrics import (
    RegionSpec,
    StabilityReport,
    extend_boundary,
    extract_boundary,
    mae,
    merge_reports,
    miou,
    stb,
)
from .synth import (
    PerturbationSpec,
    SyntheticFrame,
    SyntheticSequence,
    generate_sequence,
    generate_suite,
    load_sequence,
    perturb_step,
    save_sequence,
)

__all__ = [
    "__version__",
    "BinaryMask",
    "CorrespondenceSet",
    "FlowField",
    "Image",
    "LabelMap",
    "LossConfig",
    "SoftmaxMap",
    "argmax_labels",
    "FlowParams",
    "compute_flow",
    "forward_backward_check",
    "warp_image",
    "warp_labels",
    "warp_map",
    "FramePair",
    "LossReport",
    "PairLoss",
    "boundary_coherency",
    "confident_disagreement_set",
    "global_coherency",
    "lovasz_softmax",
    "seg_loss",
    "total_loss",
    "RegionSpec",
    "StabilityReport",
    "extend_boundary",
    "extract_boundary",
    "mae",
    "merge_reports",
    "miou",
    "stb",
    "PerturbationSpec",
    "SyntheticFrame",
    "SyntheticSequence",
    "generate_sequence",
    "generate_suite",
    "load_sequence",
    "perturb_step",
    "save_sequence",
]
