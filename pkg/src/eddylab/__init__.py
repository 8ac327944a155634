"""Vortex-noise transport SPDEs on the torus, their eddy-viscosity limits and scaling studies."""

__version__ = "0.1.0"
