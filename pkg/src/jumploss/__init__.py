"""Lindbladian dynamics with partial loss of quantum jumps.

Integrates the nonlinear master equation that interpolates between the full
Lindblad equation (all jumps kept) and normalized non-Hermitian evolution
(all jumps discarded), unravels it into postselected Monte Carlo
wave-function trajectories, and scales the postselected dynamics of
quadratic fermion chains to large sizes with a Gaussian-state engine.
"""

__version__ = "0.1.0"

from . import (
    analysis,
    config,
    experiments,
    gaussian,
    linalg,
    master_eq,
    model,
    reporting,
    trajectory,
)
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DegenerateStateError,
    DimensionError,
    EmptyEnsembleError,
    IntegrationDivergedError,
    JumplossError,
    SteadyStateError,
    ZeroAmplitudeError,
)
