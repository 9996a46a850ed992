"""Multitask 3D-CNN learning with DSNT coordinate heads, built on a small NumPy autograd engine."""

__version__ = "0.1.0"

from egomtl.kernels import BACKEND  # noqa: E402
from egomtl.tensor import Tensor, backward, check_precision, no_grad  # noqa: E402

__all__ = ["BACKEND", "Tensor", "backward", "check_precision", "no_grad", "__version__"]
