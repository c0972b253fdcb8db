"""Coreset selection through loss-trajectory correlation.

The package is organized around a small binary file format (LTRJ) that
stores per-sample loss values across training snapshots, a correlation
engine that scores training samples against a query set, selection
policies that turn scores into auditable coreset manifests, an
evaluation suite (linear datamodeling score, prediction brittleness),
and closed-form compute/storage overhead models.
"""

from ltckit.correlations import CorrelationResult, pearson, rank_average_ties, spearman
from ltckit.errors import DataError, FormatError, LtckitError
from ltckit.trajectory_store import (
    DeltaMatrix,
    TrajectoryDataset,
    TrajectoryWriter,
    ValidationReport,
    compute_deltas,
    read_dataset,
    validate,
    write_dataset,
)
from ltckit.ltc import (
    LtcMatrix,
    LtcScores,
    export_matrix_csv,
    ltc_avg,
    ltc_matrix,
    ltc_pair,
    read_ltc_matrix,
    read_scores_csv,
    top_influencers,
    write_ltc_matrix,
    write_scores_csv,
)
from ltckit.selection import (
    CoresetManifest,
    candidate_digest,
    export_manifest,
    load_manifest,
    manifest_to_json,
    select_class_balanced,
    select_top_k,
)
from ltckit.trainer import (
    LabeledDataset,
    ToyModel,
    TrainConfig,
    accuracy,
    fit,
    grad_check,
    gradient,
    init_model,
    loss_of,
    make_synthetic,
    per_sample_loss,
    predict,
    read_dataset_csv,
    train_with_logging,
    write_dataset_csv,
)
from ltckit.evaluation import (
    AttributionMatrix,
    BrittlenessReport,
    LdsConfig,
    LdsReport,
    draw_subsets,
    group_attribution,
    make_random_attribution,
    run_brittleness,
    run_lds,
    subset_outcomes,
    top_scored_ids,
    write_report,
)
from ltckit.cost_model import (
    OverheadRow,
    OverheadTable,
    WorkloadParams,
    coreset_overheads,
    render_csv,
    render_report,
    tda_overheads,
)

__version__ = "0.1.0"

__all__ = [
    "AttributionMatrix",
    "BrittlenessReport",
    "CorrelationResult",
    "CoresetManifest",
    "DataError",
    "DeltaMatrix",
    "FormatError",
    "LabeledDataset",
    "LdsConfig",
    "LdsReport",
    "LtcMatrix",
    "LtcScores",
    "LtckitError",
    "OverheadRow",
    "OverheadTable",
    "ToyModel",
    "TrainConfig",
    "TrajectoryDataset",
    "TrajectoryWriter",
    "ValidationReport",
    "WorkloadParams",
    "accuracy",
    "candidate_digest",
    "compute_deltas",
    "coreset_overheads",
    "draw_subsets",
    "export_manifest",
    "export_matrix_csv",
    "fit",
    "grad_check",
    "gradient",
    "group_attribution",
    "init_model",
    "load_manifest",
    "loss_of",
    "ltc_avg",
    "ltc_matrix",
    "ltc_pair",
    "make_random_attribution",
    "make_synthetic",
    "manifest_to_json",
    "pearson",
    "per_sample_loss",
    "predict",
    "rank_average_ties",
    "read_dataset",
    "read_dataset_csv",
    "read_ltc_matrix",
    "read_scores_csv",
    "render_csv",
    "render_report",
    "run_brittleness",
    "run_lds",
    "select_class_balanced",
    "select_top_k",
    "spearman",
    "subset_outcomes",
    "tda_overheads",
    "top_influencers",
    "train_with_logging",
    "validate",
    "write_dataset",
    "write_dataset_csv",
    "write_ltc_matrix",
    "top_scored_ids",
    "write_report",
    "write_scores_csv",
]
