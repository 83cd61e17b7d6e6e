"""Unsupervised particle sorting for single-particle cryo-EM on synthetic data.

Particles are picked from simulated micrographs, scored against reference
projections by band-limited normalized cross-correlation, and split into
signal and junk at the equal-probability point of a two-component Gaussian
mixture fitted to the scores. Scoring, sorting and reconstruction iterate
until the retained set settles.
"""

from .errors import (ConfigError, CryosortError, InsufficientDataError, InvariantError,
                     ParameterError, SortInfeasibleError)

__all__ = [
    "ConfigError",
    "CryosortError",
    "InsufficientDataError",
    "InvariantError",
    "ParameterError",
    "SortInfeasibleError",
]
__version__ = "0.1.0"
