"""Fine-grained-anchor human-object interaction detection, desk scale."""

__version__ = "0.1.0"
