"""Biobjective gasoline blend scheduling with a guided denoising diffusion model."""

from .errors import DMOError
from .problem import Instance, check_constraints, eval_objectives, standardize

__version__ = "0.1.0"

__all__ = ["DMOError", "Instance", "check_constraints", "eval_objectives", "standardize", "__version__"]
