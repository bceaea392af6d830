"""Open-world hyperspectral image classification toolkit.

Classification plus reconstruction in one network; reconstruction losses
calibrated with a generalized Pareto tail model reject unknown classes.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
