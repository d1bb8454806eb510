"""slidegraph: slide-level cancer grading on synthetic whole-slide rasters.

Two-stage pipeline: contrastive self-supervised patch features feed a
k-NN patch-centroid graph classified by a small GCN, with a blue-ratio
tile-bag baseline and quadratic-weighted-kappa evaluation. Everything runs
on a hand-rolled float64 autodiff tape, deterministic for a given seed.
"""

from .autodiff import Tape, Tensor
from .baseline import TileBag, TileBagClassifier, bag_features, concat_bag, select_tiles
from .contrastive import (
    AugmentationParams,
    ContrastivePatchEncoder,
    EncoderConfig,
    FeatureQueue,
    PretrainConfig,
    augment,
    extract_features,
    info_nce,
    momentum_update,
    pretrain,
)
from .gcn import (
    GCNConfig,
    GraphGradeClassifier,
    basic_gnn_layer,
    ensemble_probabilities,
    gcn_layer,
    train_gcn,
)
from .graphs import (
    NormalizedAdjacency,
    WSIGraph,
    build_slide_graph,
    knn_graph,
    normalize_adjacency,
)
from .metrics import (
    accuracy,
    confusion,
    isup_grade,
    kappa_weights,
    quadratic_weighted_kappa,
)
from .optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .slides import (
    Patch,
    blue_ratio,
    extract_patches,
    read_ppm,
    segment_tissue,
    write_ppm,
)
from .synthetic import SyntheticSlideSpec, generate_synthetic_slide
from .validation import ContractError

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AugmentationParams",
    "ContractError",
    "ContrastivePatchEncoder",
    "CosineSchedule",
    "EncoderConfig",
    "FeatureQueue",
    "GCNConfig",
    "GraphGradeClassifier",
    "NormalizedAdjacency",
    "Patch",
    "PretrainConfig",
    "SyntheticSlideSpec",
    "Tape",
    "Tensor",
    "TileBag",
    "TileBagClassifier",
    "WSIGraph",
    "accuracy",
    "adam_step",
    "augment",
    "bag_features",
    "basic_gnn_layer",
    "blue_ratio",
    "build_slide_graph",
    "concat_bag",
    "confusion",
    "cosine_lr",
    "ensemble_probabilities",
    "extract_features",
    "extract_patches",
    "gcn_layer",
    "generate_synthetic_slide",
    "info_nce",
    "isup_grade",
    "kappa_weights",
    "knn_graph",
    "momentum_update",
    "normalize_adjacency",
    "pretrain",
    "quadratic_weighted_kappa",
    "read_ppm",
    "segment_tissue",
    "select_tiles",
    "train_gcn",
    "write_ppm",
]
