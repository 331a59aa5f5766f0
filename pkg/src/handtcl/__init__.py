"""Time-coherent contrastive pre-training for hand pose regression, at desk scale."""

from .errors import HandTCLError

__version__ = "0.1.0"

__all__ = ["HandTCLError", "__version__"]
