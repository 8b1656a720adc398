"""Over-the-air federated learning with normalized-gradient aggregation."""

__version__ = "0.1.0"
