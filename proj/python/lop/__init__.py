"""Layer-wise pruning-ratio search and prediction on toy FFN stacks."""

from ._lop import (
    CalibrationSet,
    ImportanceTable,
    PipelineError,
    Predictor,
    TargetModel,
    brute_force_oracle,
    build_model,
    check_valid,
    compute_importance,
    config_to_masks,
    evaluate_config,
    evaluate_dense,
    generate_dataset,
    init_predictor,
    make_blobs,
    pipeline,
    predict,
    pretrain,
    project_to_constraint,
    random_search_baseline,
    run_search,
    train_predictor,
)

__all__ = [
    "CalibrationSet",
    "ImportanceTable",
    "PipelineError",
    "Predictor",
    "TargetModel",
    "brute_force_oracle",
    "build_model",
    "check_valid",
    "compute_importance",
    "config_to_masks",
    "evaluate_config",
    "evaluate_dense",
    "generate_dataset",
    "init_predictor",
    "make_blobs",
    "pipeline",
    "predict",
    "pretrain",
    "project_to_constraint",
    "random_search_baseline",
    "run_search",
    "train_predictor",
]
