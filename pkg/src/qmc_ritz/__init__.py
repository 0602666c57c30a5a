"""Deep Ritz solver for Neumann problems with Monte Carlo and quasi-Monte Carlo sampling."""

__version__ = "0.1.0"
