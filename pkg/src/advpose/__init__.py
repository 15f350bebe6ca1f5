"""Adversarially trained heatmap keypoint estimation, from scratch on numpy."""

from .tensor import ContractViolation, RngStream, Tensor

__version__ = "0.1.0"

__all__ = ["ContractViolation", "RngStream", "Tensor", "__version__"]
