"""Radical-ion-pair recombination as a continuous quantum measurement.

Builds the two-level and eight-level spin models, propagates the
measurement and Haberkorn master equations, analyses their Liouvillian
spectra for Zeno suppression, and unravels the measurement equation into
quantum-jump trajectories.
"""

__version__ = "0.1.0"

from .dynamics import PropagationResult, Variant, propagate, recombination_yields
from .errors import ConfigError, NumericalContractError, PropagationError, SpectrumError, TrajectoryError
from .models import (
    MultispinModelParams,
    RipModel,
    ToyModelParams,
    build_model,
    build_multispin_model,
    build_toy_model,
)
from .spectra import build_superoperator, classify_modes, spectrum, stationary_state, zeno_scan, zeno_time
from .trajectories import correlation_analytic, correlation_mc, ensemble_average, simulate_trajectory

__all__ = [
    "ConfigError",
    "MultispinModelParams",
    "NumericalContractError",
    "PropagationError",
    "PropagationResult",
    "RipModel",
    "SpectrumError",
    "ToyModelParams",
    "TrajectoryError",
    "Variant",
    "build_model",
    "build_multispin_model",
    "build_superoperator",
    "build_toy_model",
    "classify_modes",
    "correlation_analytic",
    "correlation_mc",
    "ensemble_average",
    "propagate",
    "recombination_yields",
    "simulate_trajectory",
    "spectrum",
    "stationary_state",
    "zeno_scan",
    "zeno_time",
]
