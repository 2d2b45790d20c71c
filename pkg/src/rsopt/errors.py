"""Exception types shared across the package."""


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class InfeasibleError(ValueError):
    """The constraint set leaves no feasible point for the requested mode."""


class SolverError(RuntimeError):
    """A backward solve left its a-priori envelope or hit an invalid state."""


class ConfigurationError(ValueError):
    """Inconsistent combination of utility, fields and constraint set."""


class PreconditionError(ValueError):
    """Hypotheses of a checked statement do not hold for the given input."""


class ParseError(ValueError):
    """Malformed configuration document; the message names the location."""
