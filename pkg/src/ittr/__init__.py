"""Unpaired image-to-image translation on a minimal CPU autodiff core."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
