"""Time-aware multimodal fusion for sparse clinical time series, signals and text."""

__version__ = "0.1.0"
