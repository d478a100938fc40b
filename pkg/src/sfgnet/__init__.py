"""Stochastic filter groups for two-task CNNs, on a small numpy autodiff core."""

__version__ = "0.1.0"
