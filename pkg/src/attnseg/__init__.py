"""Hybrid-attention ultrasound segmentation on a from-scratch autodiff core."""

from attnseg.tensor import Tensor, no_grad, finite_diff_grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "finite_diff_grad_check", "__version__"]
