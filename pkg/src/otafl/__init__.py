"""Simulator for over-the-air clustered wireless federated learning."""

__version__ = "0.1.0"
