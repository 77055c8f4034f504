"""Self-explaining node classification on kNN feature graphs."""

__version__ = "0.1.0"
