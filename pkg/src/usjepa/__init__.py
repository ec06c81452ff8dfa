"""Region-conditioned joint-embedding predictive pretraining for ultrasound frames."""

from ._accel import backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
