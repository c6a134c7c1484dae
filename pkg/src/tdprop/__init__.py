"""Real-time propagation of 1D Schrödinger and mean-field systems on a finite-element mesh."""

__version__ = "0.1.0"
