"""Rate-distortion toolkit for compressed distillations of training data."""

__version__ = "0.1.0"
