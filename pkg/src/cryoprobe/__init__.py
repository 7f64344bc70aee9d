"""Simulated cryogenic wafer probing of quantum-dot spin-qubit devices."""

__version__ = "0.1.0"
