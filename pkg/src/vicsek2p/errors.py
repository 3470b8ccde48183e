"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical aborts with 3, validation failures with 1.
"""


class Vicsek2pError(Exception):
    """Base class for all toolkit errors."""


class DomainError(Vicsek2pError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class RangeError(DomainError):
    """A parameter left the supported numerical range (e.g. lambda bounds)."""


class PositivityError(DomainError):
    """A density request violates the equilibrium positivity bound."""


class EvaluationError(Vicsek2pError):
    """A user-supplied function returned a non-finite value."""


class ConsistencyError(Vicsek2pError):
    """Two redundant computation routes disagree beyond tolerance."""


class ConfigError(Vicsek2pError, ValueError):
    """Invalid run configuration (bad key, bad value, bad file)."""


class NumericsError(Vicsek2pError, RuntimeError):
    """A numerical procedure failed (blow-up, non-convergence)."""


class StiffnessError(NumericsError):
    """A solver coefficient degenerated below its floor."""


class SamplingError(NumericsError):
    """A rejection sampler exceeded its draw budget."""
