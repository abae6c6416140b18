"""Flow-matching interactive world model.

The compiled extension provides the simulator, control sampling, the
autoregressive sampler and the evaluation metrics. Arrays are numpy, frames
are (3, H, W) float32 in [0, 1].
"""

import torch  # noqa: F401  loads libtorch before the extension

from ._core import (
    ConfigError,
    ControlPoint,
    DomainError,
    FormatError,
    Model,
    NumericError,
    Session,
    ShapeError,
    StateError,
    __version__,
    block_match_flow,
    build_sparse_raster,
    iou,
    psnr,
    sample_control_pixels,
    sample_path,
    simulate,
    ssim,
    target_vector_field,
)

__all__ = [
    "ConfigError",
    "ControlPoint",
    "DomainError",
    "FormatError",
    "Model",
    "NumericError",
    "Session",
    "ShapeError",
    "StateError",
    "__version__",
    "block_match_flow",
    "build_sparse_raster",
    "iou",
    "psnr",
    "sample_control_pixels",
    "sample_path",
    "simulate",
    "ssim",
    "target_vector_field",
]
