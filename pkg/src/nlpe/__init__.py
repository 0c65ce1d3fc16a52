"""Software emulator of a multi-precision NLP inference engine."""

from .numerics import MacMode, ScalarFormat, Tensor

__version__ = "0.1.0"

__all__ = ["MacMode", "ScalarFormat", "Tensor", "__version__"]
