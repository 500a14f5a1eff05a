"""Fused multi-scale (1x1 + 3x3 + 5x5) convolution."""
from emkit.multiconv.backend import (
    available_backends,
    count_macs,
    default_backend,
    set_default_backend,
)
from emkit.multiconv.bench import BenchConfig, BenchReport, benchmark, compare_backends
from emkit.multiconv.equiv import SweepResult, random_config, sweep
from emkit.multiconv.ops import (
    ConvKernelSet,
    compose_kernels,
    conv2d,
    multi_scale_backward,
    multi_scale_forward,
    multiconv,
)

__all__ = [
    "BenchConfig",
    "BenchReport",
    "ConvKernelSet",
    "available_backends",
    "benchmark",
    "compare_backends",
    "compose_kernels",
    "conv2d",
    "count_macs",
    "default_backend",
    "multi_scale_backward",
    "multi_scale_forward",
    "multiconv",
    "random_config",
    "set_default_backend",
    "sweep",
    "SweepResult",
]
