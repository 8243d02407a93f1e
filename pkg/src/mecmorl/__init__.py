"""Multi-objective task offloading for mobile edge computing."""

__version__ = "0.1.0"
