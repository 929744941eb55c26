"""Numerical laboratory for the symmetric simple exclusion process with a slow bond.

Submodules
----------
lattice       rates, windows and discrete generators
moments       mean and two-point correlation solvers
walks         random walks, local times, transition probabilities
robin         test functions, Robin heat semigroup, OU variance
exclusion     kinetic Monte Carlo for the exclusion process
fluctuations  fluctuation-field statistics and their predictions
harness       experiment configs, runs and manifests
"""
from .lattice import ModelParams, Window1D, WindowV, TruncationError

__version__ = "0.1.0"

__all__ = ["ModelParams", "Window1D", "WindowV", "TruncationError", "__version__"]
