"""Price suggestion for second-hand marketplace listings.

A qualification classifier decides whether an item's image/text features
support a reasonable price suggestion; a price regressor suggests a log
price judged against a target price range. The two heads are trained
jointly under a percentile or threshold constraint and evaluated with six
range-based metrics.
"""

from .data import (
    DatasetFormatError,
    GeneratorTruth,
    ItemRecord,
    SyntheticConfig,
    generate_synthetic,
    inverse_log_transform,
    load_dataset,
    log_transform,
    save_dataset,
    skewness,
    split_dataset,
)
from .features import (
    CategoryStats,
    EmbeddingTable,
    FeatureStandardizer,
    FusionLayer,
    StatisticalFeatures,
    attention_fuse,
    compute_statistical_features,
    embed_tokens,
    pad_or_truncate,
)
from .metrics import MetricReport, SplitReport, compute_metrics, log_error_to_ratio, split_report
from .models import (
    HeadConfig,
    HeadParams,
    ModelFormatError,
    PredictionOutcome,
    TrainedModel,
    forward_classification,
    forward_regression,
    init_head,
    load_model,
    save_model,
)
from .numeric import (
    AdamState,
    DenseLayer,
    adam_step,
    dense_backward,
    dense_forward,
    gradient_check,
)
from .objectives import (
    ConstraintConfig,
    PercentileObjective,
    RangeLossParams,
    ThresholdObjective,
    hard_indicator,
    percentile_objective,
    range_loss,
    range_loss_sold,
    range_loss_unsold,
    threshold_objective,
)
from .training import (
    SweepSpec,
    TrainingConfig,
    TrainingDiverged,
    TrainingHistory,
    as_trained_model,
    evaluate_split,
    model_predict,
    run_experiment_suite,
    select_constraint_weight,
    train_baseline_regression,
    train_joint,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CategoryStats",
    "ConstraintConfig",
    "DatasetFormatError",
    "DenseLayer",
    "EmbeddingTable",
    "FeatureStandardizer",
    "FusionLayer",
    "GeneratorTruth",
    "HeadConfig",
    "HeadParams",
    "ItemRecord",
    "MetricReport",
    "ModelFormatError",
    "PercentileObjective",
    "PredictionOutcome",
    "RangeLossParams",
    "SplitReport",
    "StatisticalFeatures",
    "SweepSpec",
    "SyntheticConfig",
    "ThresholdObjective",
    "TrainedModel",
    "TrainingConfig",
    "TrainingDiverged",
    "TrainingHistory",
    "adam_step",
    "as_trained_model",
    "attention_fuse",
    "compute_metrics",
    "compute_statistical_features",
    "dense_backward",
    "dense_forward",
    "embed_tokens",
    "evaluate_split",
    "forward_classification",
    "forward_regression",
    "generate_synthetic",
    "gradient_check",
    "hard_indicator",
    "init_head",
    "inverse_log_transform",
    "load_dataset",
    "load_model",
    "log_error_to_ratio",
    "log_transform",
    "model_predict",
    "pad_or_truncate",
    "percentile_objective",
    "range_loss",
    "range_loss_sold",
    "range_loss_unsold",
    "run_experiment_suite",
    "save_dataset",
    "save_model",
    "select_constraint_weight",
    "skewness",
    "split_dataset",
    "split_report",
    "threshold_objective",
    "train_baseline_regression",
    "train_joint",
]
