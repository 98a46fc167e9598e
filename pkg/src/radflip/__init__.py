"""Radiation-induced bit-flip emulation for quantized DNN engine images."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
