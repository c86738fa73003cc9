"""Langevin-dynamics samplers with preconditioned noise, and the mixing,
adversarial-robustness and out-of-distribution evaluations used to compare
them."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
