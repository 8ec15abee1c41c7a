"""U-Net segmentation with multi-layer convolutional sparse coding blocks."""

from ._cscunet import (
    ConfigError,
    DataError,
    Model,
    NonFiniteError,
    ShapeError,
    compute_metrics,
    conv2d,
    conv_transpose2d,
    evaluate,
    gen_synthetic,
    ista_pursuit,
    load_checkpoint,
    predict,
    selftest,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Model",
    "NonFiniteError",
    "ShapeError",
    "compute_metrics",
    "conv2d",
    "conv_transpose2d",
    "evaluate",
    "gen_synthetic",
    "ista_pursuit",
    "load_checkpoint",
    "predict",
    "selftest",
    "train",
]
