"""Quantized network toolkit: widen, slim, distill and run bit-packed nets."""

__version__ = "0.1.0"
