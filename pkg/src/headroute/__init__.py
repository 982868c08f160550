"""Expert-head routing and usage-driven pruning for transformer encoders."""

__version__ = "0.1.0"
