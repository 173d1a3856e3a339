"""Learning-free image restoration with untrained multi-level encoder-decoder networks."""

__version__ = "0.1.0"
