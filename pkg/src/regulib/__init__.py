"""Adaptive internal-model output regulation: synthesis, simulation and numerical checks."""

__version__ = "0.1.0"
