"""Hierarchical softmax classification with OOD inference at variable granularity."""

from .bench import BenchConfig, run_bench
from .data import (
    Dataset,
    DepthBand,
    SplitSpec,
    generate_synthetic_features,
    generate_synthetic_hierarchy,
    read_dataset,
    select_holdout_subtrees,
    split_from_selection,
    write_dataset,
)
from .estimator import (
    FlatSoftmaxClassifier,
    HierarchicalSoftmaxClassifier,
    TNRThresholdPredictor,
)
from .evaluation import auroc, granularity_auroc, hierarchical_outcomes, tnr_sweep
from .exceptions import (
    CalibrationError,
    DatasetError,
    HierarchyError,
    HierNavError,
    ModelError,
    TrainingDivergedError,
)
from .hierarchy import (
    Hierarchy,
    entropy_prune,
    hierarchy_distance,
    holdout_split,
    parse_hierarchy,
    prune_single_child,
)
from .inference import (
    NODE_WISE,
    PATH_WISE,
    ThresholdTable,
    calibrate,
    hierarchical_infer,
    tnr_threshold,
)
from .model import ModelParams, forward, init_params, load_model, node_path_probabilities, save_model
from .scoring import path_scores, score_samples
from .training import LossConfig, TrainConfig, loss_and_grad, train_sgd

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
