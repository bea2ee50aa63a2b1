"""Simulation-based inference for an individual-level fertility microsimulation."""

__version__ = "0.1.0"
