"""Capacity measures, sharpness and PAC-Bayes bounds for small ReLU networks."""

__version__ = "0.1.0"
