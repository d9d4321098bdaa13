"""Table structure recognition toolkit: targets, losses, decoding and evaluation."""

__version__ = "0.1.0"
