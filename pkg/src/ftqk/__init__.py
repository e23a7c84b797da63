"""Finite-temperature quantum Krylov thermodynamics of the spin-1/2 Heisenberg ring."""

__version__ = "0.1.0"
