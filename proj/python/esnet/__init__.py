"""ESNet segmentation network: CPU forward/backward, training and analysis."""

from ._core import (
    Network,
    conv2d,
    default_config,
    flop_count,
    kernel_accounting,
    reference_accounting,
    learnable_param_count,
    receptive_field,
    reduction_ratio,
    run_cli,
    shape_trace,
    synth_dataset,
    train_toy,
    transposed_conv2d,
)

__all__ = [
    "Network",
    "conv2d",
    "default_config",
    "flop_count",
    "kernel_accounting",
    "reference_accounting",
    "learnable_param_count",
    "receptive_field",
    "reduction_ratio",
    "run_cli",
    "shape_trace",
    "synth_dataset",
    "train_toy",
    "transposed_conv2d",
]
