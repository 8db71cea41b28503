"""pushedfront: branching Brownian motion in the fully pushed regime.

Spectral analysis, exact semigroup kernels, forward particle simulation,
k-spine importance sampling, Brownian coalescent point processes and a
deterministic FKPP solver, tied together by an experiment harness and CLI.
"""

from .spectral import (
    Potential,
    PruferTrace,
    SpectralData,
    SpectralError,
    classify_regime,
    eigenfunction,
    eigenvalue,
    limit_top_eigenvalue,
    prufer_integrate,
    regime_thresholds,
    solve_spectrum,
    verify_negative_spectrum_example,
)

__version__ = "0.1.0"

__all__ = [
    "Potential",
    "PruferTrace",
    "SpectralData",
    "SpectralError",
    "classify_regime",
    "eigenfunction",
    "eigenvalue",
    "limit_top_eigenvalue",
    "prufer_integrate",
    "regime_thresholds",
    "solve_spectrum",
    "verify_negative_spectrum_example",
    "__version__",
]
