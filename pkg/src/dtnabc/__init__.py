"""Absorbing boundary conditions from a discrete Dirichlet-to-Neumann map."""

__version__ = "0.1.0"
