"""Joint PSA/competing-risks modeling with counterfactual salvage-therapy effects."""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
