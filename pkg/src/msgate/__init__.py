"""Simulator of a bichromatic (Molmer-Sorensen) entangling gate on two trapped-ion qubits."""

__version__ = "0.1.0"
