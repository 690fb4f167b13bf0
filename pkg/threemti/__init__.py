"""RGB-guided thermal super-resolution with cross-modal self-attention."""

from threemti.errors import ThreemtiError

__version__ = "0.1.0"

__all__ = ["ThreemtiError", "__version__"]
