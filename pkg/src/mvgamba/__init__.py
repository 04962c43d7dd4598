"""Multi-view Gaussian reconstruction with selective state-space sequence modeling."""

__version__ = "0.1.0"
