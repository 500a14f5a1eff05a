"""Multi-scale fused convolution, accumulative KV memory and adaptive losses
for toy-scale autoregressive weather forecasting."""

__version__ = "0.1.0"
