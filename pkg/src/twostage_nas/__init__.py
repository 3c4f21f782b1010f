"""Two-stage (structural, then modular) multi-objective search for detection pipelines."""

__version__ = "0.1.0"
