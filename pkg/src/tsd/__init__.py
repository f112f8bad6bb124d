"""Toolkit for the weakly coupled oscillator-pendulum Hamiltonian: surfaces
of section, splitting integrals, scattering maps, periodic-orbit indices and
window-chained diffusion itineraries."""

from .engine import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
