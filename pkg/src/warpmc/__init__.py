"""Learned large-timestep proposals for Boltzmann sampling of small molecular surrogates."""
__version__ = "0.1.0"
