"""Few-shot metric learning with a shared embedding and several similarity heads."""

from ._bsnet import (
    CheckpointError,
    ConfigError,
    DataError,
    Dataset,
    Model,
    NumericError,
    RunConfig,
    ShapeError,
    accuracy_stats,
    ci_half_width,
    estimate_constant_family,
    evaluate,
    generate_synthetic,
    grad_cam_map,
    load_config,
    load_image_dir,
    numeric_mode,
    predict,
    rademacher,
    set_numeric_mode,
    split_dataset,
    train,
    weight_sweep,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Dataset",
    "Model",
    "NumericError",
    "RunConfig",
    "ShapeError",
    "accuracy_stats",
    "ci_half_width",
    "estimate_constant_family",
    "evaluate",
    "generate_synthetic",
    "grad_cam_map",
    "load_config",
    "load_image_dir",
    "numeric_mode",
    "predict",
    "rademacher",
    "set_numeric_mode",
    "split_dataset",
    "train",
    "weight_sweep",
]
