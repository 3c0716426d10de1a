"""Simulation and evaluation toolkit for SRAM PUF aging studies."""

__version__ = "0.1.0"
