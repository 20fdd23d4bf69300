"""Anisotropic Navier-Stokes in shallow basins: Q2/Q1 hexahedra, BDF2 projection."""

__version__ = "0.1.0"
