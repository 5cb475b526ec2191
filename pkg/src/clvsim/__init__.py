"""Customer lifetime value engine: segmentation, transitions, value assignment and simulation."""

__version__ = "0.1.0"
