"""Spin Hamiltonian, lineshape and fitting engine for d1 transition-metal defects."""

__version__ = "0.1.0"
