"""GP-MIA: membership inference with a Gaussian-process classifier over
post-hoc diagnostics of a trained model."""

__version__ = "0.1.0"

from gpmia._backend import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
