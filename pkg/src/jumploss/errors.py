"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, ContractError and its
subclasses -> 2, CapacityError -> 3.
"""


class JumplossError(Exception):
    """Base class for all package errors."""


class DimensionError(JumplossError):
    """Array shape incompatible with the operation."""


class ContractError(JumplossError):
    """A documented precondition or invariant was violated."""


class CapacityError(JumplossError):
    """Requested problem size exceeds a documented capacity bound."""


class ConfigError(JumplossError):
    """Invalid experiment configuration (bad key, type, or range)."""


class IntegrationDivergedError(ContractError):
    """Integrator left the physical manifold beyond tolerance."""


class DegenerateStateError(ContractError):
    """Gaussian frame lost rank (orthogonality collapse)."""


class ZeroAmplitudeError(ContractError):
    """Quantum jump applied where the jump expectation vanishes."""


class EmptyEnsembleError(ContractError):
    """All postselected trajectories were discarded before the horizon."""


class SteadyStateError(ContractError):
    """A run failed to reach a steady state within its horizon."""
